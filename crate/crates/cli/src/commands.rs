use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crossloc_core::datamodel::io::{read_regions, read_run, read_runs_dir};
use crossloc_core::datamodel::{is_same_place, Region, Run, SAME_PLACE_THRESHOLD_M};
use crossloc_core::encoders::{Checkpoint, Modality};
use crossloc_core::evaluation::evaluate_protocol;
use crossloc_core::retrieval::{build_index, embed_entries, read_evdb, write_evdb};
use crossloc_core::synthbench::{
    default_regions, generate_runs, generate_world, write_world, RunSpec, REGIONS_FILE,
};
use crossloc_core::training::{train, TrainingSet};

use crate::config::Config;
use crate::{Command, TrainArgs, UsageError};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenWorld {
            seed,
            places,
            runs,
            out,
        } => gen_world(seed, places, runs, &out),
        Command::Train(args) => train_cmd(args),
        Command::Embed {
            checkpoint,
            run,
            modality,
            out_evdb,
        } => embed(&checkpoint, &run, modality, &out_evdb),
        Command::Query {
            evdb,
            checkpoint,
            query_run,
            query_sample,
            modality,
            k,
        } => query(&evdb, &checkpoint, &query_run, query_sample, modality, k),
        Command::Eval {
            runs_dir,
            checkpoint,
            regions,
            protocol,
            config,
            report,
        } => eval(runs_dir, &checkpoint, regions, protocol, config, &report),
    }
}

fn gen_world(seed: u64, places: usize, runs: usize, out: &Path) -> Result<()> {
    if runs < 2 {
        return Err(UsageError(format!("--runs must be >= 2, got {runs}")).into());
    }
    let world = generate_world(seed, places)?;
    let runs = generate_runs(&world, &RunSpec::defaults(runs))?;
    write_world(out, &runs, &default_regions(&world))?;
    println!(
        "wrote {} runs of {} places to {}",
        runs.len(),
        world.len(),
        out.display()
    );
    Ok(())
}

/// Runs directory and region file, falling back to the config and then to
/// the `gen-world` layout (`<root>/runs`, `<root>/regions.csv`).
fn data_paths(
    runs_dir: Option<PathBuf>,
    regions: Option<PathBuf>,
    cfg: &Config,
) -> Result<(PathBuf, PathBuf)> {
    let runs_dir = runs_dir
        .or_else(|| cfg.paths.runs_dir.clone())
        .ok_or_else(|| UsageError("no runs directory (use --runs-dir)".into()))?;
    let regions = match regions.or_else(|| cfg.paths.regions.clone()) {
        Some(r) => r,
        None => runs_dir
            .parent()
            .map(|p| p.join(REGIONS_FILE))
            .filter(|p| p.is_file())
            .ok_or_else(|| UsageError("no region file (use --regions)".into()))?,
    };
    Ok((runs_dir, regions))
}

fn load_data(runs_dir: &Path, regions: &Path) -> Result<(Vec<Run>, Vec<Region>)> {
    let runs = read_runs_dir(runs_dir)?;
    let regions = read_regions(regions)?;
    Ok((runs, regions))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = Config::load(a.config.as_deref(), a.profile)?;
    if let Some(p) = a.paradigm {
        cfg.set_paradigm(p);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    cfg.validate()?;
    let (runs_dir, regions) = data_paths(a.runs_dir, a.regions, &cfg)?;
    let (runs, regions) = load_data(&runs_dir, &regions)?;
    let set = TrainingSet::from_runs(&runs, &regions, cfg.train.samples_per_place)?;

    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out_checkpoint.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let file = File::create(&log_path).with_context(|| format!("{}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let mut io_err = None;
    let out = train(&set, &cfg.encoder, &cfg.train, &mut |e| {
        if io_err.is_none() {
            io_err = writeln!(log, "{}", e.to_json_line()).err();
        }
        if e.epoch == 1 || e.epoch % 10 == 0 {
            eprintln!("{} epoch {:>4} loss {:.5}", e.stage, e.epoch, e.loss);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("{}", log_path.display()));
    }
    log.flush()
        .with_context(|| format!("{}", log_path.display()))?;
    out.checkpoint.save(&a.out_checkpoint)?;
    println!(
        "trained {} ({} places) -> {}",
        cfg.train.paradigm,
        set.len(),
        a.out_checkpoint.display()
    );
    Ok(())
}

fn embed(checkpoint: &Path, run: &Path, modality: Modality, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let run = read_run(run)?;
    if let Some(s) = run.samples.iter().find(|s| match modality {
        Modality::Image => s.image.is_none(),
        Modality::Cloud => s.submap.is_none(),
    }) {
        anyhow::bail!(crossloc_core::Error::Format {
            path: run.run_id.clone().into(),
            detail: format!("sample {} has no {modality} media", s.sample_id),
        });
    }
    let entries = embed_entries(&run.samples, modality, &ckpt.params, &ckpt.config)?;
    write_evdb(out, &entries)?;
    println!(
        "{} {modality} embeddings -> {}",
        entries.len(),
        out.display()
    );
    Ok(())
}

fn query(
    evdb: &Path,
    checkpoint: &Path,
    query_run: &Path,
    sample_id: u64,
    modality: Modality,
    k: usize,
) -> Result<()> {
    if k < 1 {
        return Err(UsageError("--k must be >= 1".into()).into());
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let index = build_index(read_evdb(evdb)?)?;
    let run = read_run(query_run)?;
    let sample = run
        .samples
        .iter()
        .find(|s| s.sample_id == sample_id)
        .ok_or_else(|| UsageError(format!("run {} has no sample {sample_id}", run.run_id)))?;
    let q = embed_entries(
        std::slice::from_ref(sample),
        modality,
        &ckpt.params,
        &ckpt.config,
    )?;
    let res = index.knn_query(&q[0].ev_f64(), k)?;
    let mut text = String::from("rank\tsample_id\tdistance\tsame_place\n");
    for (i, h) in res.hits.iter().enumerate() {
        text += &format!(
            "{}\t{}\t{:.6}\t{}\n",
            i + 1,
            h.sample_id,
            h.distance,
            is_same_place(&sample.pose, &h.pose, SAME_PLACE_THRESHOLD_M)
        );
    }
    emit(&text)
}

fn eval(
    runs_dir: Option<PathBuf>,
    checkpoint: &Path,
    regions: Option<PathBuf>,
    protocol: Option<String>,
    config: Option<PathBuf>,
    report: &Path,
) -> Result<()> {
    let mut cfg = Config::load(config.as_deref(), None)?;
    if let Some(p) = protocol {
        cfg.eval.protocol = p;
    }
    cfg.validate()?;
    let protocol = cfg.protocol()?;
    let (runs_dir, regions) = data_paths(runs_dir, regions, &cfg)?;
    let (runs, regions) = load_data(&runs_dir, &regions)?;
    if runs.len() < 2 {
        anyhow::bail!(crossloc_core::Error::Format {
            path: runs_dir,
            detail: format!("evaluation needs at least 2 runs, found {}", runs.len()),
        });
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let rep = evaluate_protocol(protocol, &runs, &regions, &ckpt.params, &ckpt.config)?;
    fs::create_dir_all(report).with_context(|| format!("{}", report.display()))?;
    let summary = rep.summary_table();
    for (name, body) in [
        ("records.txt", rep.records()),
        ("summary.txt", summary.clone()),
        ("curves.csv", rep.curves_csv()),
    ] {
        let p = report.join(name);
        fs::write(&p, body).with_context(|| format!("{}", p.display()))?;
    }
    emit(&summary)
}

/// Writes to stdout; a reader that hung up early is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
