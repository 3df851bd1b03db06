//! Training, evaluation and ablation runs over in-memory videos.

use pit_core::data::{Split, VideoSample};
use pit_core::division::DivisionSpec;
use pit_core::model::{PitConfig, PitModel};
use pit_core::retrieval::{evaluate, GalleryEntry, ItemMeta, RetrievalReport};
use pit_core::training::{train_epoch, EpochMetrics};

use crate::checkpoint::Checkpoint;
use crate::dataset::{DatasetAdapter, TrainLoader};
use crate::error::{Error, Result};

/// Offset separating the PK sampler's random stream from initialisation.
const SAMPLER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn train_loader(config: &PitConfig, videos: Vec<VideoSample>) -> Result<TrainLoader> {
    TrainLoader::new(
        videos,
        config.batch_p,
        config.batch_q,
        config.seed ^ SAMPLER_STREAM,
    )
}

/// Trains from a fresh initialisation for `config.epochs` epochs, calling
/// `on_epoch` after each one.
pub fn train(
    config: &PitConfig,
    loader: &mut TrainLoader,
    mut on_epoch: impl FnMut(&EpochMetrics, &Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let model = PitModel::new(config.clone(), loader.num_classes())?;
    let sgd = Checkpoint::fresh_sgd(&model);
    let mut ck = Checkpoint {
        model,
        sgd,
        epochs_done: 0,
        metrics: String::new(),
    };
    for epoch in 0..config.epochs {
        let m = train_epoch(
            &mut ck.model,
            &loader.videos,
            &loader.labels,
            &mut loader.sampler,
            &mut ck.sgd,
            epoch,
        )?;
        ck.epochs_done = epoch + 1;
        on_epoch(&m, &ck)?;
    }
    Ok(ck)
}

pub fn embed_all(model: &PitModel, videos: &[VideoSample]) -> Result<Vec<GalleryEntry>> {
    videos
        .iter()
        .map(|v| {
            Ok(GalleryEntry {
                embedding: model.embed_video(v)?,
                meta: ItemMeta {
                    person_id: v.person_id,
                    camera_id: v.camera_id,
                    video_id: v.video_id,
                },
            })
        })
        .collect()
}

/// Query and gallery videos used for evaluation.
pub struct EvalSets {
    /// `test` when the dataset has a query split, otherwise `train`
    /// (training videos against themselves).
    pub name: &'static str,
    pub queries: Vec<VideoSample>,
    pub gallery: Vec<VideoSample>,
}

pub fn eval_sets(data: &impl DatasetAdapter) -> Result<EvalSets> {
    if data.records().iter().any(|r| r.split == Split::Query) {
        Ok(EvalSets {
            name: "test",
            queries: data.load_split(Split::Query)?,
            gallery: data.load_split(Split::Gallery)?,
        })
    } else {
        let train = data.load_split(Split::Train)?;
        Ok(EvalSets {
            name: "train",
            queries: train.clone(),
            gallery: train,
        })
    }
}

pub fn evaluate_model(
    model: &PitModel,
    queries: &[VideoSample],
    gallery: &[VideoSample],
) -> Result<RetrievalReport> {
    let q = embed_all(model, queries)?;
    // avoid embedding the same videos twice when evaluating on the train set
    let same = queries.len() == gallery.len()
        && queries.iter().zip(gallery).all(|(a, b)| a.video_id == b.video_id);
    let g = if same { q.clone() } else { embed_all(model, gallery)? };
    Ok(evaluate(&q, &g, model.config.distance)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub division: DivisionSpec,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
}

/// Trains and evaluates `base` once per (division, seed).
pub fn ablate(
    base: &PitConfig,
    divisions: &[DivisionSpec],
    seeds: &[u64],
    train_videos: &[VideoSample],
    sets: &EvalSets,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    if divisions.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid("an ablation grid needs at least one division and one seed".into()));
    }
    let mut runs = Vec::new();
    for division in divisions {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.division = division.clone();
            cfg.seed = seed;
            cfg.validate()?;
            let mut loader = train_loader(&cfg, train_videos.to_vec())?;
            let ck = train(&cfg, &mut loader, |_, _| Ok(()))?;
            let report = evaluate_model(&ck.model, &sets.queries, &sets.gallery)?;
            let run = AblationRun {
                division: division.clone(),
                seed,
                rank1: report.rank(1),
                map: report.map,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Mean Rank-1 and mAP of every division, in first-appearance order.
pub fn ablation_means(runs: &[AblationRun]) -> Vec<(DivisionSpec, f64, f64)> {
    let mut order: Vec<DivisionSpec> = Vec::new();
    for r in runs {
        if !order.contains(&r.division) {
            order.push(r.division.clone());
        }
    }
    order
        .into_iter()
        .map(|d| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.division == d).collect();
            let n = rs.len() as f64;
            let rank1 = rs.iter().map(|r| r.rank1).sum::<f64>() / n;
            let map = rs.iter().map(|r| r.map).sum::<f64>() / n;
            (d, rank1, map)
        })
        .collect()
}
