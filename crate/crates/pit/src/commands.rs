//! Command implementations behind the `pit` binary. Every command writes
//! its resolved settings to `log` before doing any work.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pit_core::data::{generate as generate_videos, Split, SyntheticSpec};
use pit_core::division::DivisionSpec;
use pit_core::model::PitConfig;
use pit_core::retrieval::repeated_trials;

use crate::attention;
use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, render_model_config, render_synthetic};
use crate::dataset::{write_dataset, DatasetAdapter, DirDataset, Manifest};
use crate::error::{io_err, Error, Result};
use crate::pipeline::{self, EvalSets};
use crate::pnm;
use crate::report;

fn echo(log: &mut dyn Write, title: &str, body: &str) -> Result<()> {
    let io = |e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    writeln!(log, "# {title}").map_err(io)?;
    log.write_all(body.as_bytes()).map_err(io)?;
    log.flush().map_err(io)
}

fn say(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

pub fn generate(spec: &SyntheticSpec, out: &Path, log: &mut dyn Write) -> Result<Manifest> {
    echo(log, "synthetic dataset", &render_synthetic(spec))?;
    let videos = generate_videos(spec)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = write_dataset(out, &videos)?;
    let frames: usize = manifest.records.iter().map(|r| r.frames.len()).sum();
    writeln!(log, "wrote {} videos, {frames} frames to {}", manifest.records.len(), out.display())
        .ok();
    Ok(manifest)
}

pub struct TrainArgs {
    pub config: PitConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Save the checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Loss log; defaults to the checkpoint path with `.log` appended.
    pub log_file: Option<PathBuf>,
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

/// Trains on the `train` split and evaluates on the test split (or on the
/// training videos when there is none). The metrics are stored in the
/// checkpoint and appended to the loss log.
pub fn train(args: &TrainArgs, log: &mut dyn Write) -> Result<Checkpoint> {
    let cfg = &args.config;
    echo(log, "resolved config", &render_model_config(cfg))?;
    let data = DirDataset::open(&args.data)?;
    let train_videos = data.load_split(Split::Train)?;
    let mut loader = pipeline::train_loader(cfg, train_videos)?;
    let undersized = loader.undersized_ids();
    if !undersized.is_empty() {
        writeln!(
            log,
            "warning: person ids {undersized:?} have fewer than {} videos; sampling with replacement",
            cfg.batch_q
        )
        .ok();
    }
    let log_file = args.log_file.clone().unwrap_or_else(|| log_path(&args.out));
    let mut loss_log = String::new();
    let every = args.checkpoint_every;
    let mut ck = pipeline::train(cfg, &mut loader, |m, ck| {
        let last = m.steps.last().copied().unwrap_or_default();
        let line = format!(
            "epoch={} lr={:?} loss={:?} classification={:?} triplet={:?}",
            m.epoch,
            m.lr,
            m.mean_loss(),
            last.classification,
            last.triplet
        );
        writeln!(log, "{line}").ok();
        loss_log.push_str(&line);
        loss_log.push('\n');
        if every > 0 && ck.epochs_done % every == 0 {
            checkpoint::save(&args.out, ck)?;
        }
        Ok(())
    })?;
    let sets = pipeline::eval_sets(&data)?;
    let report = pipeline::evaluate_model(&ck.model, &sets.queries, &sets.gallery)?;
    ck.metrics = report::summary(sets.name, &report);
    checkpoint::save(&args.out, &ck)?;
    loss_log.push_str(&ck.metrics);
    fs::write(&log_file, &loss_log).map_err(io_err(&log_file))?;
    writeln!(
        log,
        "final eval_set={} rank1={:?} map={:?} checkpoint={}",
        sets.name,
        report.rank(1),
        report.map,
        args.out.display()
    )
    .ok();
    Ok(ck)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
}

/// Evaluates a checkpoint and writes the report. Without `trials` the
/// summary equals the metrics logged when the checkpoint was saved.
///
/// With `trials = n` the evaluation identities are halved at random `n`
/// times; each trial evaluates the checkpoint on the queries and gallery
/// of one half.
pub fn eval(args: &EvalArgs, log: &mut dyn Write) -> Result<String> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let cfg_text = render_model_config(&ck.model.config);
    echo(log, "resolved config", &cfg_text)?;
    let data = DirDataset::open(&args.data)?;
    let sets = pipeline::eval_sets(&data)?;
    let distance = ck.model.config.distance.to_string();
    let text = match args.trials {
        None => {
            let r = pipeline::evaluate_model(&ck.model, &sets.queries, &sets.gallery)?;
            let summary = report::summary(sets.name, &r);
            let matches = !ck.metrics.is_empty() && summary == ck.metrics;
            writeln!(
                log,
                "rank1={:?} map={:?} matches_checkpoint_metrics={matches}",
                r.rank(1),
                r.map
            )
            .ok();
            report::render(sets.name, &distance, &r, &cfg_text)
        }
        Some(n) => {
            let seed = args.seed.unwrap_or(ck.model.config.seed);
            writeln!(log, "trials={n} seed={seed}").ok();
            let t = trials(&ck, &sets, n, seed)?;
            writeln!(log, "mean rank1={:?} map={:?}", t.rank(1), t.map).ok();
            report::render_trials(sets.name, &distance, &t, &cfg_text)
        }
    };
    fs::write(&args.out, &text).map_err(io_err(&args.out))?;
    Ok(text)
}

fn trials(
    ck: &Checkpoint,
    sets: &EvalSets,
    n: usize,
    seed: u64,
) -> Result<pit_core::retrieval::TrialsReport> {
    let ids: Vec<usize> = sets
        .queries
        .iter()
        .chain(&sets.gallery)
        .map(|v| v.person_id)
        .collect();
    let q_all = pipeline::embed_all(&ck.model, &sets.queries)?;
    let g_all = pipeline::embed_all(&ck.model, &sets.gallery)?;
    let mode = ck.model.config.distance;
    Ok(repeated_trials(&ids, n, seed, |_, _, test| {
        let keep = |e: &&pit_core::retrieval::GalleryEntry| test.contains(&e.meta.person_id);
        let q: Vec<_> = q_all.iter().filter(keep).cloned().collect();
        let g: Vec<_> = g_all.iter().filter(keep).cloned().collect();
        pit_core::retrieval::evaluate(&q, &g, mode)
    })?)
}

/// Grid file: model config keys plus `grid.divisions` (comma-separated
/// division strings) and optional `grid.seeds` (comma-separated, default
/// the config seed).
pub struct Grid {
    pub base: PitConfig,
    pub divisions: Vec<DivisionSpec>,
    pub seeds: Vec<u64>,
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let entries = config::read_entries(path)?;
    let (grid, model): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| e.key.starts_with("grid."));
    let base = config::model_config(&model, path)?;
    let mut divisions = Vec::new();
    let mut seeds = vec![base.seed];
    for e in grid {
        let fail = |msg: String| Error::Parse {
            path: path.into(),
            line: e.line,
            msg,
        };
        let items = e.value.split(',').map(str::trim).filter(|s| !s.is_empty());
        match e.key.as_str() {
            "grid.divisions" => {
                divisions = items
                    .map(|s| s.parse::<DivisionSpec>().map_err(|err| fail(err.to_string())))
                    .collect::<Result<_>>()?
            }
            "grid.seeds" => {
                seeds = items
                    .map(|s| s.parse::<u64>().map_err(|_| fail(format!("invalid seed `{s}`"))))
                    .collect::<Result<_>>()?
            }
            other => return Err(fail(format!("unknown key `{other}`"))),
        }
    }
    if divisions.is_empty() {
        return Err(Error::Invalid(format!("{}: grid.divisions is empty", path.display())));
    }
    for d in &divisions {
        let mut cfg = base.clone();
        cfg.division = d.clone();
        cfg.validate().map_err(|err| Error::Format {
            path: path.into(),
            msg: format!("division {d}: {err}"),
        })?;
    }
    Ok(Grid {
        base,
        divisions,
        seeds,
    })
}

pub const ABLATION_HEADER: &str = "# pit-ablation 1";

/// Runs the grid and writes a tab-separated table: one row per run, then
/// one `mean` row per division.
pub fn ablate(grid_path: &Path, data_path: &Path, out: &Path, log: &mut dyn Write) -> Result<String> {
    let grid = read_grid(grid_path)?;
    echo(log, "resolved base config", &render_model_config(&grid.base))?;
    let divisions: Vec<String> = grid.divisions.iter().map(|d| d.to_string()).collect();
    writeln!(log, "grid.divisions = {}", divisions.join(", ")).ok();
    writeln!(log, "grid.seeds = {:?}", grid.seeds).ok();
    let data = DirDataset::open(data_path)?;
    let train_videos = data.load_split(Split::Train)?;
    let sets = pipeline::eval_sets(&data)?;
    let runs = pipeline::ablate(&grid.base, &grid.divisions, &grid.seeds, &train_videos, &sets, |r| {
        writeln!(log, "{}\tseed={}\trank1={:?}\tmap={:?}", r.division, r.seed, r.rank1, r.map).ok();
    })?;
    let mut table = format!("{ABLATION_HEADER}\neval_set\t{}\ndivision\tseed\trank1\tmap\n", sets.name);
    for r in &runs {
        table.push_str(&format!("{}\t{}\t{:?}\t{:?}\n", r.division, r.seed, r.rank1, r.map));
    }
    for (d, rank1, map) in pipeline::ablation_means(&runs) {
        table.push_str(&format!("{d}\tmean\t{rank1:?}\t{map:?}\n"));
    }
    fs::write(out, &table).map_err(io_err(out))?;
    Ok(table)
}

pub fn attention(
    checkpoint_path: &Path,
    image_path: &Path,
    camera: usize,
    out: &Path,
    log: &mut dyn Write,
) -> Result<Vec<PathBuf>> {
    let ck = checkpoint::load(checkpoint_path)?;
    echo(log, "resolved config", &render_model_config(&ck.model.config))?;
    let image = pnm::read(image_path)?;
    let written = attention::export(&ck.model, &image, camera, out)?;
    say(log, &format!("wrote {} files to {}", written.len(), out.display()))?;
    Ok(written)
}
