//! Batch construction and the two learning paradigms: a triplet-trained
//! image teacher followed by a cloud student that mimics it, or joint
//! training of both encoders under the combined loss.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::datamodel::{
    filter_by_regions, is_same_place, Image, PointCloud, Region, Run, Sample, Split,
    SAME_PLACE_THRESHOLD_M,
};
use crate::diffcore::{forward, Graph, ParamStore, Tensor, Var};
use crate::encoders::{
    embed_cloud, embed_cloud_graph, embed_image, embed_image_graph, init_params, Checkpoint,
    EncoderConfig, Modality,
};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss_graph, distance, joint_embedding_loss_graph, triplet_loss_graph, DistanceKind,
    LossPreset, DEFAULT_MARGIN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Paradigm {
    #[serde(rename = "teacher-student")]
    TeacherStudent,
    #[serde(rename = "combined")]
    Combined,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::TeacherStudent => "teacher-student",
            Paradigm::Combined => "combined",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "teacher-student" => Ok(Paradigm::TeacherStudent),
            "combined" => Ok(Paradigm::Combined),
            _ => Err(Error::invalid(format!(
                "unknown paradigm `{s}` (expected teacher-student or combined)"
            ))),
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

/// One bias-corrected Adam update of every parameter present in `grads`.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(g.shape()));
            state.v.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted").data_mut();
        let v = state.v.get_mut(name).expect("inserted").data_mut();
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    /// Places per batch N.
    pub places_per_batch: usize,
    pub samples_per_place: usize,
    /// Epochs per training stage.
    pub epochs: usize,
    pub adam: AdamConfig,
    pub preset: LossPreset,
    /// Distance of the triplet and combined losses.
    pub distance: DistanceKind,
    /// Distance of the student's joint-embedding loss.
    pub student_distance: DistanceKind,
    pub margin: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Combined,
            places_per_batch: 4,
            samples_per_place: 2,
            epochs: 60,
            adam: AdamConfig::default(),
            preset: LossPreset::SmCmJe,
            distance: DistanceKind::L2,
            student_distance: DistanceKind::SmoothL1,
            margin: DEFAULT_MARGIN,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Setup used on synthbench worlds: no augmentation (mirroring turns
    /// one sinusoid texture into another place's) and step size 3e-3.
    pub fn synthbench(paradigm: Paradigm) -> Self {
        let preset = match paradigm {
            Paradigm::Combined => LossPreset::SmCmJe,
            Paradigm::TeacherStudent => LossPreset::TeacherStudent,
        };
        Self {
            paradigm,
            preset,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            augment: AugmentConfig::identity(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.places_per_batch < 2 {
            return Err(Error::invalid(
                "places_per_batch must be >= 2 so every anchor has a negative",
            ));
        }
        if self.samples_per_place < 2 {
            return Err(Error::invalid(
                "samples_per_place must be >= 2 so every anchor has a positive",
            ));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::invalid(format!("bad optimizer settings {a:?}")));
        }
        match (self.paradigm, self.preset) {
            (Paradigm::TeacherStudent, LossPreset::TeacherStudent) => {}
            (Paradigm::Combined, LossPreset::SmCm | LossPreset::SmCmJe) => {}
            (p, l) => {
                return Err(Error::invalid(format!(
                    "loss preset `{l}` does not fit paradigm `{p}`"
                )));
            }
        }
        self.augment.validate()
    }
}

/// Samples grouped into places.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    places: Vec<Vec<Sample>>,
}

impl TrainingSet {
    /// Groups samples greedily: a sample joins the first place whose first
    /// sample lies within 20 m, otherwise it starts a new place. Places with
    /// fewer than `min_samples` samples are dropped.
    pub fn from_samples(samples: Vec<Sample>, min_samples: usize) -> Result<Self> {
        let mut places: Vec<Vec<Sample>> = Vec::new();
        for s in samples {
            s.image()?;
            s.submap()?;
            match places
                .iter_mut()
                .find(|p| is_same_place(&p[0].pose, &s.pose, SAME_PLACE_THRESHOLD_M))
            {
                Some(p) => p.push(s),
                None => places.push(vec![s]),
            }
        }
        places.retain(|p| p.len() >= min_samples);
        Ok(Self { places })
    }

    /// Training-split samples of every run.
    pub fn from_runs(runs: &[Run], regions: &[Region], min_samples: usize) -> Result<Self> {
        let mut samples = Vec::new();
        for run in runs {
            samples.extend(filter_by_regions(run, regions, Split::Train)?);
        }
        Self::from_samples(samples, min_samples)
    }

    pub fn places(&self) -> &[Vec<Sample>] {
        &self.places
    }

    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.places.iter().flatten()
    }
}

/// One augmented observation in a batch.
#[derive(Clone, Debug)]
pub struct BatchItem {
    /// Index into [`TrainingSet::places`].
    pub place: usize,
    pub run_id: String,
    pub sample_id: u64,
    pub image: Image,
    pub cloud: PointCloud,
    /// Seed of this item's point resampling.
    pub sample_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// `(anchor, positive, negative)` item indices.
    pub triplets: Vec<(usize, usize, usize)>,
}

/// Batch of `n` uniformly drawn places.
pub fn build_batch<R: Rng + ?Sized>(
    set: &TrainingSet,
    n: usize,
    per_place: usize,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<Batch> {
    check_set(set, n, per_place)?;
    let mut ids: Vec<usize> = (0..set.len()).collect();
    let (chosen, _) = ids.partial_shuffle(rng, n);
    let chosen = chosen.to_vec();
    build_batch_for(set, &chosen, per_place, augment, rng)
}

fn check_set(set: &TrainingSet, n: usize, per_place: usize) -> Result<()> {
    if n < 2 || per_place < 2 {
        return Err(Error::invalid(
            "a batch needs >= 2 places and >= 2 samples per place",
        ));
    }
    if set.len() < n {
        return Err(Error::invalid(format!(
            "training set has {} usable places, batch needs {n}",
            set.len()
        )));
    }
    if let Some(p) = set.places.iter().position(|p| p.len() < per_place) {
        return Err(Error::invalid(format!(
            "place {p} has fewer than {per_place} samples"
        )));
    }
    Ok(())
}

/// Batch over the given places: `per_place` distinct samples each, every
/// item an anchor whose positive is the next sample of its place and whose
/// negative is drawn uniformly from the other places' items.
pub fn build_batch_for<R: Rng + ?Sized>(
    set: &TrainingSet,
    places: &[usize],
    per_place: usize,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<Batch> {
    check_set(set, places.len(), per_place)?;
    let mut picks = Vec::with_capacity(places.len() * per_place);
    for &p in places {
        let members = set
            .places
            .get(p)
            .ok_or_else(|| Error::invalid(format!("place {p} out of range")))?;
        let idx = rand::seq::index::sample(rng, members.len(), per_place);
        for i in idx.iter() {
            picks.push((p, &members[i], rng.random::<u64>()));
        }
    }
    let total = picks.len();
    let mut triplets = Vec::with_capacity(total);
    for a in 0..total {
        let base = a - a % per_place;
        let pos = base + (a - base + 1) % per_place;
        let neg = loop {
            let c = rng.random_range(0..total);
            if c / per_place != a / per_place {
                break c;
            }
        };
        triplets.push((a, pos, neg));
    }
    let items = picks
        .into_par_iter()
        .map(|(place, sample, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let aug = augment_pair(sample, augment, &mut r)?;
            Ok(BatchItem {
                place,
                run_id: sample.run_id.clone(),
                sample_id: sample.sample_id,
                image: aug.image,
                cloud: aug.cloud,
                sample_seed: r.random(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { items, triplets })
}

/// Place groups of one epoch: a shuffled pass in chunks of `n`, the last
/// chunk topped up with other random places.
fn epoch_chunks<R: Rng + ?Sized>(n_places: usize, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_places).collect();
    order.shuffle(rng);
    let mut chunks: Vec<Vec<usize>> = order.chunks(n).map(<[usize]>::to_vec).collect();
    if let Some(last) = chunks.last_mut() {
        while last.len() < n {
            let c = rng.random_range(0..n_places);
            if !last.contains(&c) {
                last.push(c);
            }
        }
    }
    chunks
}

/// Mean losses of one epoch, one JSON line in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub sm: f64,
    pub cm: f64,
    pub je: f64,
    pub wall_s: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Copy, Default)]
struct Parts {
    loss: f64,
    sm: f64,
    cm: f64,
    je: f64,
}

/// Shared epoch loop: `step` builds the batch loss graph and returns its
/// parts; only parameters with names starting with `trainable` are updated.
fn run_stage<F>(
    stage: &str,
    set: &TrainingSet,
    cfg: &TrainConfig,
    mut params: ParamStore,
    trainable: &str,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
    step: F,
) -> Result<(ParamStore, Vec<EpochLog>)>
where
    F: Fn(&mut Graph, &Batch) -> Result<(Var, Parts)>,
{
    check_set(set, cfg.places_per_batch, cfg.samples_per_place)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let chunks = epoch_chunks(set.len(), cfg.places_per_batch, &mut rng);
        let mut acc = Parts::default();
        for (b, places) in chunks.iter().enumerate() {
            let batch =
                build_batch_for(set, places, cfg.samples_per_place, &cfg.augment, &mut rng)?;
            let mut g = Graph::new(&params);
            let (root, parts) = step(&mut g, &batch)?;
            if !parts.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("{stage} batch {b} has loss {}", parts.loss),
                });
            }
            let grads = g.backward(root)?.subset(trainable);
            drop(g);
            optimizer_step(&mut params, &grads, &mut state, &cfg.adam)?;
            acc.loss += parts.loss;
            acc.sm += parts.sm;
            acc.cm += parts.cm;
            acc.je += parts.je;
        }
        if params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                detail: format!("{stage} parameters became non-finite"),
            });
        }
        let k = chunks.len() as f64;
        let entry = EpochLog {
            stage: stage.to_string(),
            epoch,
            loss: acc.loss / k,
            sm: acc.sm / k,
            cm: acc.cm / k,
            je: acc.je / k,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((params, log))
}

fn embed_batch_images(g: &mut Graph, batch: &Batch, enc: &EncoderConfig) -> Result<Vec<Var>> {
    batch
        .items
        .iter()
        .map(|it| embed_image_graph(g, &it.image, enc))
        .collect()
}

fn embed_batch_clouds(g: &mut Graph, batch: &Batch, enc: &EncoderConfig) -> Result<Vec<Var>> {
    batch
        .items
        .iter()
        .map(|it| {
            let mut r = ChaCha8Rng::seed_from_u64(it.sample_seed);
            embed_cloud_graph(g, &it.cloud, enc, &mut r)
        })
        .collect()
}

fn finish(enc: &EncoderConfig, params: ParamStore, log: Vec<EpochLog>) -> TrainOutcome {
    let mut checkpoint = Checkpoint::new(enc.clone(), params);
    checkpoint.epoch = log.len() as u32;
    checkpoint.history = log.iter().map(|e| e.loss).collect();
    TrainOutcome { checkpoint, log }
}

/// Trains the image encoder `f` alone with the image triplet loss. The
/// cloud encoder keeps its initial parameters.
pub fn train_teacher(
    set: &TrainingSet,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.paradigm != Paradigm::TeacherStudent {
        return Err(Error::invalid(
            "train_teacher needs the teacher-student paradigm",
        ));
    }
    let params = init_params(enc, cfg.seed)?;
    let (kind, margin) = (cfg.distance, cfg.margin);
    let (params, log) = run_stage(
        "teacher",
        set,
        cfg,
        params,
        Modality::Image.prefix(),
        cfg.seed ^ 0x7ea,
        on_epoch,
        |g, batch| {
            let f = embed_batch_images(g, batch, enc)?;
            let l = triplet_loss_graph(g, &f, &f, &batch.triplets, kind, margin)?;
            let v = g.value(l).item();
            Ok((
                l,
                Parts {
                    loss: v,
                    sm: v,
                    ..Default::default()
                },
            ))
        },
    )?;
    Ok(finish(enc, params, log))
}

/// Trains the cloud encoder `g` to reproduce the frozen teacher's image
/// embeddings of the same (identically augmented) samples.
pub fn train_student(
    set: &TrainingSet,
    enc: &EncoderConfig,
    teacher: &Checkpoint,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    teacher.ensure_config(enc)?;
    let params = teacher.params.clone();
    let frozen = teacher.params.subset(Modality::Image.prefix());
    let kind = cfg.student_distance;
    let (params, log) = run_stage(
        "student",
        set,
        cfg,
        params,
        Modality::Cloud.prefix(),
        cfg.seed ^ 0x57d,
        on_epoch,
        |g, batch| {
            // teacher embeddings enter the graph as constants
            let targets = batch
                .items
                .par_iter()
                .map(|it| forward(&frozen, |tg| embed_image_graph(tg, &it.image, enc)))
                .collect::<Result<Vec<_>>>()?;
            let f: Vec<Var> = targets.into_iter().map(|t| g.input(t)).collect();
            let c = embed_batch_clouds(g, batch, enc)?;
            let l = joint_embedding_loss_graph(g, &f, &c, kind)?;
            let v = g.value(l).item();
            Ok((
                l,
                Parts {
                    loss: v,
                    je: v,
                    ..Default::default()
                },
            ))
        },
    )?;
    Ok(finish(enc, params, log))
}

/// Trains both encoders jointly under the weighted combined loss.
pub fn train_combined(
    set: &TrainingSet,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights = match (cfg.paradigm, cfg.preset.weights()) {
        (Paradigm::Combined, Some(w)) => w,
        _ => {
            return Err(Error::invalid(
                "train_combined needs the combined paradigm and a combined loss preset",
            ))
        }
    };
    let params = init_params(enc, cfg.seed)?;
    let (kind, margin) = (cfg.distance, cfg.margin);
    let (params, log) = run_stage(
        "combined",
        set,
        cfg,
        params,
        "",
        cfg.seed ^ 0xc0b,
        on_epoch,
        |g, batch| {
            let f = embed_batch_images(g, batch, enc)?;
            let c = embed_batch_clouds(g, batch, enc)?;
            let l = combined_loss_graph(g, &f, &c, &batch.triplets, &weights, kind, margin)?;
            let parts = Parts {
                loss: g.value(l.total).item(),
                sm: g.value(l.sm).item(),
                cm: g.value(l.cm).item(),
                je: g.value(l.je).item(),
            };
            Ok((l.total, parts))
        },
    )?;
    Ok(finish(enc, params, log))
}

/// Runs the configured paradigm end to end.
pub fn train(
    set: &TrainingSet,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    match cfg.paradigm {
        Paradigm::Combined => train_combined(set, enc, cfg, on_epoch),
        Paradigm::TeacherStudent => {
            let teacher = train_teacher(set, enc, cfg, on_epoch)?;
            let student = train_student(set, enc, &teacher.checkpoint, cfg, on_epoch)?;
            let mut log = teacher.log;
            log.extend(student.log);
            Ok(TrainOutcome {
                checkpoint: student.checkpoint,
                log,
            })
        }
    }
}

/// Mean `d(f(I), g(m))` over every sample of the set, without augmentation.
pub fn mean_joint_distance(
    set: &TrainingSet,
    params: &ParamStore,
    enc: &EncoderConfig,
    kind: DistanceKind,
) -> Result<f64> {
    let samples: Vec<&Sample> = set.samples().collect();
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let d = samples
        .par_iter()
        .map(|s| {
            let a = embed_image(s.image()?, params, enc)?;
            let b = embed_cloud(s.submap()?, params, enc)?;
            distance(kind, &a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests;
