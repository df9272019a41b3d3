//! Recall metrics and the run-pair evaluation protocol.
//!
//! Each ordered pair of distinct runs is evaluated with the first run as
//! database (subsampled at the database spacing) and the validation-region
//! samples of the second run as queries. A retrieval counts as correct when
//! any of the top-k hits lies within the same-place radius of the query.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::datamodel::{
    filter_by_regions, is_same_place, subsample_run, Pose, Region, Run, Split,
    SAME_PLACE_THRESHOLD_M,
};
use crate::diffcore::ParamStore;
use crate::encoders::{EncoderConfig, Modality};
use crate::error::{Error, Result};
use crate::retrieval::{build_index, embed_entries, DbEntry, Hit, QueryResult};

pub const DEFAULT_K_MAX: usize = 25;

/// Which encoder embeds the query and which the database.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pairing {
    pub query: Modality,
    pub db: Modality,
}

impl Pairing {
    /// Table order: 2D-to-2D, 2D-to-3D, 3D-to-2D, 3D-to-3D.
    pub const ALL: [Pairing; 4] = [
        Pairing::new(Modality::Image, Modality::Image),
        Pairing::new(Modality::Image, Modality::Cloud),
        Pairing::new(Modality::Cloud, Modality::Image),
        Pairing::new(Modality::Cloud, Modality::Cloud),
    ];

    pub const fn new(query: Modality, db: Modality) -> Self {
        Self { query, db }
    }

    pub fn name(self) -> String {
        format!("{}-to-{}", self.query.tag(), self.db.tag())
    }
}

impl std::fmt::Display for Pairing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (q, d) = s
            .split_once("-to-")
            .ok_or_else(|| Error::invalid(format!("bad pairing `{s}` (expected e.g. 2D-to-3D)")))?;
        Ok(Pairing::new(q.parse()?, d.parse()?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Database every 5 m, every validation sample as query.
    Standard,
    /// Database every 20 m, queries every 10 m.
    Sparse,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::Sparse => "sparse",
        }
    }

    pub fn settings(self) -> EvalSettings {
        match self {
            Protocol::Standard => EvalSettings::default(),
            Protocol::Sparse => EvalSettings {
                db_spacing: 20.0,
                query_spacing: Some(10.0),
                ..EvalSettings::default()
            },
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Protocol::Standard),
            "sparse" => Ok(Protocol::Sparse),
            _ => Err(Error::invalid(format!(
                "unknown protocol `{s}` (expected standard or sparse)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub db_spacing: f64,
    /// `None` keeps every validation sample of the query run.
    pub query_spacing: Option<f64>,
    pub k_max: usize,
    pub threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            db_spacing: 5.0,
            query_spacing: None,
            k_max: DEFAULT_K_MAX,
            threshold: SAME_PLACE_THRESHOLD_M,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.db_spacing > 0.0) || self.query_spacing.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::invalid("spacings must be positive"));
        }
        if self.k_max < 1 {
            return Err(Error::invalid("k_max must be >= 1"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("same-place threshold must be positive"));
        }
        Ok(())
    }
}

/// `k` used by recall@1%: one percent of the database, rounded up, at least 1.
pub fn one_percent_k(db_size: usize) -> Result<usize> {
    if db_size == 0 {
        return Err(Error::Empty("database"));
    }
    Ok(db_size.div_ceil(100).max(1))
}

/// 1-based rank of the first hit accepted by `is_match`, per query.
pub fn first_match_ranks_by<F>(results: &[QueryResult], mut is_match: F) -> Vec<Option<usize>>
where
    F: FnMut(usize, &Hit) -> bool,
{
    results
        .iter()
        .enumerate()
        .map(|(q, r)| r.hits.iter().position(|h| is_match(q, h)).map(|i| i + 1))
        .collect()
}

/// First-match ranks under the same-place radius rule.
pub fn first_match_ranks(
    results: &[QueryResult],
    query_poses: &[Pose],
    threshold: f64,
) -> Result<Vec<Option<usize>>> {
    if results.len() != query_poses.len() {
        return Err(Error::shape(
            "first_match_ranks",
            format!(
                "{} results for {} query poses",
                results.len(),
                query_poses.len()
            ),
        ));
    }
    Ok(first_match_ranks_by(results, |q, h| {
        is_same_place(&query_poses[q], &h.pose, threshold)
    }))
}

/// Fraction of queries with a correct hit at rank <= k.
pub fn recall_from_ranks(ranks: &[Option<usize>], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if k < 1 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// recall@k with the 20 m rule.
pub fn recall_at_k(results: &[QueryResult], query_poses: &[Pose], k: usize) -> Result<f64> {
    let ranks = first_match_ranks(results, query_poses, SAME_PLACE_THRESHOLD_M)?;
    recall_from_ranks(&ranks, k)
}

pub fn recall_at_one_percent(
    results: &[QueryResult],
    query_poses: &[Pose],
    db_size: usize,
) -> Result<f64> {
    recall_at_k(results, query_poses, one_percent_k(db_size)?)
}

/// Recall for k = 1..=k_max; non-decreasing by construction.
pub fn recall_curve(ranks: &[Option<usize>], k_max: usize) -> Result<Vec<f64>> {
    (1..=k_max).map(|k| recall_from_ranks(ranks, k)).collect()
}

/// Metrics of one (database run, query run, pairing) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub pairing: Pairing,
    pub db_run: String,
    pub query_run: String,
    pub db_size: usize,
    pub query_count: usize,
    pub k_one_percent: usize,
    /// `recall[k - 1]` is recall@k; empty when `query_count == 0`.
    pub recall: Vec<f64>,
    pub recall_one_percent: f64,
}

impl RecallReport {
    /// No validation queries: excluded from averages.
    pub fn is_empty(&self) -> bool {
        self.query_count == 0
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.recall.get(i)).copied()
    }

    pub fn to_record(&self) -> String {
        let mut s = format!(
            "pair db={} query={} pairing={} db_size={} queries={} k1pct={}",
            self.db_run,
            self.query_run,
            self.pairing,
            self.db_size,
            self.query_count,
            self.k_one_percent
        );
        if self.is_empty() {
            s.push_str(" empty");
        } else {
            let _ = write!(s, " recall@1%={:.6}", self.recall_one_percent);
            for (i, r) in self.recall.iter().enumerate() {
                let _ = write!(s, " r@{}={r:.6}", i + 1);
            }
        }
        s
    }
}

/// Scores `queries` against an index over `db`.
pub fn evaluate_entries(
    db: &[DbEntry],
    queries: &[DbEntry],
    settings: &EvalSettings,
) -> Result<(Vec<Option<usize>>, usize)> {
    settings.validate()?;
    let index = build_index(db.to_vec())?;
    let results = queries
        .iter()
        .map(|q| index.knn_query(&q.ev_f64(), settings.k_max))
        .collect::<Result<Vec<_>>>()?;
    let poses: Vec<Pose> = queries.iter().map(|q| q.pose).collect();
    Ok((
        first_match_ranks(&results, &poses, settings.threshold)?,
        index.len(),
    ))
}

fn report_from_entries(
    db: &[DbEntry],
    queries: &[DbEntry],
    pairing: Pairing,
    db_run: &str,
    query_run: &str,
    settings: &EvalSettings,
) -> Result<RecallReport> {
    let k_one_percent = one_percent_k(db.len())?;
    let mut report = RecallReport {
        pairing,
        db_run: db_run.to_string(),
        query_run: query_run.to_string(),
        db_size: db.len(),
        query_count: queries.len(),
        k_one_percent,
        recall: Vec::new(),
        recall_one_percent: 0.0,
    };
    if queries.is_empty() {
        return Ok(report);
    }
    let (ranks, _) = evaluate_entries(
        db,
        queries,
        &EvalSettings {
            k_max: settings.k_max.max(k_one_percent),
            ..settings.clone()
        },
    )?;
    report.recall = recall_curve(&ranks, settings.k_max)?;
    report.recall_one_percent = recall_from_ranks(&ranks, k_one_percent)?;
    Ok(report)
}

/// Database and query embeddings of one run, both modalities.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub run_id: String,
    pub condition: String,
    /// Indexed by `Modality::to_u8`.
    pub db: [Vec<DbEntry>; 2],
    pub queries: [Vec<DbEntry>; 2],
}

impl PreparedRun {
    pub fn db_entries(&self, m: Modality) -> &[DbEntry] {
        &self.db[m.to_u8() as usize]
    }

    pub fn query_entries(&self, m: Modality) -> &[DbEntry] {
        &self.queries[m.to_u8() as usize]
    }
}

/// Subsamples and filters `run`, then embeds both sides with both encoders.
pub fn prepare_run(
    run: &Run,
    regions: &[Region],
    params: &ParamStore,
    enc: &EncoderConfig,
    settings: &EvalSettings,
) -> Result<PreparedRun> {
    settings.validate()?;
    let db_run = subsample_run(run, settings.db_spacing)?;
    let query_src = match settings.query_spacing {
        Some(s) => subsample_run(run, s)?,
        None => run.clone(),
    };
    let queries = filter_by_regions(&query_src, regions, Split::Validation)?;
    let embed = |samples: &[_], m| embed_entries(samples, m, params, enc);
    Ok(PreparedRun {
        run_id: run.run_id.clone(),
        condition: run.condition.clone(),
        db: [
            embed(&db_run.samples, Modality::Image)?,
            embed(&db_run.samples, Modality::Cloud)?,
        ],
        queries: [
            embed(&queries, Modality::Image)?,
            embed(&queries, Modality::Cloud)?,
        ],
    })
}

/// One ordered run pair under one modality pairing.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run_pair(
    db_run: &Run,
    query_run: &Run,
    regions: &[Region],
    params: &ParamStore,
    enc: &EncoderConfig,
    pairing: Pairing,
    settings: &EvalSettings,
) -> Result<RecallReport> {
    if db_run.run_id == query_run.run_id {
        return Err(Error::invalid(format!(
            "database and query run are both `{}`",
            db_run.run_id
        )));
    }
    let db = prepare_run(db_run, regions, params, enc, settings)?;
    let q = prepare_run(query_run, regions, params, enc, settings)?;
    evaluate_prepared_pair(&db, &q, pairing, settings)
}

pub fn evaluate_prepared_pair(
    db: &PreparedRun,
    query: &PreparedRun,
    pairing: Pairing,
    settings: &EvalSettings,
) -> Result<RecallReport> {
    report_from_entries(
        db.db_entries(pairing.db),
        query.query_entries(pairing.query),
        pairing,
        &db.run_id,
        &query.run_id,
        settings,
    )
}

/// Unweighted mean over the non-empty pairs of one modality pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanRecall {
    pub pairing: Pairing,
    pub pairs_used: usize,
    pub recall: Vec<f64>,
    pub recall_one_percent: f64,
}

impl MeanRecall {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.recall.get(i)).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub protocol: String,
    pub settings: EvalSettings,
    /// Ordered by (database run, query run, pairing).
    pub pairs: Vec<RecallReport>,
    /// One per pairing in table order; `None` when every pair was empty.
    pub means: Vec<Option<MeanRecall>>,
}

fn mean_of(pairing: Pairing, reports: &[&RecallReport], k_max: usize) -> Option<MeanRecall> {
    let used: Vec<&&RecallReport> = reports.iter().filter(|r| !r.is_empty()).collect();
    if used.is_empty() {
        return None;
    }
    let n = used.len() as f64;
    let recall = (0..k_max)
        .map(|i| used.iter().map(|r| r.recall[i]).sum::<f64>() / n)
        .collect();
    Some(MeanRecall {
        pairing,
        pairs_used: used.len(),
        recall,
        recall_one_percent: used.iter().map(|r| r.recall_one_percent).sum::<f64>() / n,
    })
}

/// Averages per-pair reports into an [`EvaluationReport`].
pub fn summarize(
    protocol: &str,
    settings: &EvalSettings,
    pairs: Vec<RecallReport>,
) -> EvaluationReport {
    let means = Pairing::ALL
        .iter()
        .map(|&p| {
            let of: Vec<&RecallReport> = pairs.iter().filter(|r| r.pairing == p).collect();
            mean_of(p, &of, settings.k_max)
        })
        .collect();
    EvaluationReport {
        protocol: protocol.to_string(),
        settings: settings.clone(),
        pairs,
        means,
    }
}

/// Every ordered pair of distinct runs, all four pairings.
pub fn evaluate_all_pairs(
    runs: &[Run],
    regions: &[Region],
    params: &ParamStore,
    enc: &EncoderConfig,
    settings: &EvalSettings,
) -> Result<EvaluationReport> {
    evaluate_all_pairs_named("custom", runs, regions, params, enc, settings)
}

fn evaluate_all_pairs_named(
    protocol: &str,
    runs: &[Run],
    regions: &[Region],
    params: &ParamStore,
    enc: &EncoderConfig,
    settings: &EvalSettings,
) -> Result<EvaluationReport> {
    if runs.len() < 2 {
        return Err(Error::invalid(format!(
            "evaluation needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    for (i, a) in runs.iter().enumerate() {
        if runs[i + 1..].iter().any(|b| b.run_id == a.run_id) {
            return Err(Error::invalid(format!("duplicate run id `{}`", a.run_id)));
        }
    }
    let prepared = runs
        .iter()
        .map(|r| prepare_run(r, regions, params, enc, settings))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize, Pairing)> = (0..runs.len())
        .flat_map(|d| {
            (0..runs.len())
                .filter(move |&q| q != d)
                .map(move |q| (d, q))
        })
        .flat_map(|(d, q)| Pairing::ALL.into_iter().map(move |p| (d, q, p)))
        .collect();
    let pairs = jobs
        .par_iter()
        .map(|&(d, q, p)| evaluate_prepared_pair(&prepared[d], &prepared[q], p, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(protocol, settings, pairs))
}

/// Evaluation under a named protocol.
pub fn evaluate_protocol(
    protocol: Protocol,
    runs: &[Run],
    regions: &[Region],
    params: &ParamStore,
    enc: &EncoderConfig,
) -> Result<EvaluationReport> {
    evaluate_all_pairs_named(
        protocol.name(),
        runs,
        regions,
        params,
        enc,
        &protocol.settings(),
    )
}

/// The sparse 20 m database / 10 m query protocol.
pub fn protocol_comparison_mode(
    runs: &[Run],
    regions: &[Region],
    params: &ParamStore,
    enc: &EncoderConfig,
) -> Result<EvaluationReport> {
    evaluate_protocol(Protocol::Sparse, runs, regions, params, enc)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl EvaluationReport {
    pub fn mean(&self, pairing: Pairing) -> Option<&MeanRecall> {
        self.means.iter().flatten().find(|m| m.pairing == pairing)
    }

    fn header(&self) -> String {
        let q = match self.settings.query_spacing {
            Some(s) => format!("{s} m"),
            None => "all".to_string(),
        };
        format!(
            "# protocol={} db_spacing={} m query_spacing={q} threshold={} m k_max={}\n",
            self.protocol, self.settings.db_spacing, self.settings.threshold, self.settings.k_max
        )
    }

    /// One line per pair and pairing, preceded by the settings header.
    pub fn records(&self) -> String {
        let mut s = self.header();
        for r in &self.pairs {
            s.push_str(&r.to_record());
            s.push('\n');
        }
        s
    }

    /// Mean recall@1%, recall@1 and recall@5 (in percent) per pairing.
    pub fn summary_table(&self) -> String {
        let mut s = self.header();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>10} {:>9} {:>9}",
            "pairing", "pairs", "recall@1%", "recall@1", "recall@5"
        );
        for (p, m) in Pairing::ALL.iter().zip(&self.means) {
            match m {
                Some(m) => {
                    let at = |k| m.recall_at(k).map(pct).unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        s,
                        "{:<10} {:>6} {:>10} {:>9} {:>9}",
                        p.name(),
                        m.pairs_used,
                        pct(m.recall_one_percent),
                        at(1),
                        at(5)
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "{:<10} {:>6} {:>10} {:>9} {:>9}",
                        p.name(),
                        0,
                        "-",
                        "-",
                        "-"
                    );
                }
            }
        }
        s
    }

    /// CSV of mean recall@k for k = 1..k_max, one column per pairing.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("k");
        for p in Pairing::ALL {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
        for k in 1..=self.settings.k_max {
            let _ = write!(s, "{k}");
            for m in &self.means {
                match m.as_ref().and_then(|m| m.recall_at(k)) {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}
