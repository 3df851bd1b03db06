//! Video-to-video distances and the cross-camera evaluation protocol
//! (CMC curve and mAP), plus repeated-trial averaging.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How two pyramids are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DistanceMode {
    /// Euclidean distance between the concatenated branch features.
    #[default]
    Concat,
    /// Sum of per-branch Euclidean distances.
    SumPerBranch,
}

impl DistanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMode::Concat => "concat",
            DistanceMode::SumPerBranch => "sum_per_branch",
        }
    }
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(DistanceMode::Concat),
            "sum_per_branch" => Ok(DistanceMode::SumPerBranch),
            other => Err(Error::Config(format!(
                "unknown distance mode `{other}` (expected concat or sum_per_branch)"
            ))),
        }
    }
}

/// Evaluation-time video representation: one feature vector per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub branches: Vec<Vec<f64>>,
}

impl Embedding {
    fn same_structure(&self, other: &Self) -> bool {
        self.branches.len() == other.branches.len()
            && self
                .branches
                .iter()
                .zip(&other.branches)
                .all(|(a, b)| a.len() == b.len())
    }
}

fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &Embedding, b: &Embedding, mode: DistanceMode) -> Result<f64> {
    if !a.same_structure(b) {
        return Err(Error::StructureMismatch);
    }
    let pairs = a.branches.iter().zip(&b.branches);
    Ok(match mode {
        DistanceMode::Concat => libm::sqrt(pairs.map(|(x, y)| squared(x, y)).sum()),
        DistanceMode::SumPerBranch => pairs.map(|(x, y)| libm::sqrt(squared(x, y))).sum(),
    })
}

/// Identity, camera and video id of a query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ItemMeta {
    pub person_id: usize,
    pub camera_id: usize,
    pub video_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub embedding: Embedding,
    pub meta: ItemMeta,
}

/// Ranking of the filtered gallery for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query: ItemMeta,
    /// Gallery video ids, nearest first; same-id same-camera items removed.
    pub ranked_video_ids: Vec<usize>,
    pub ranked_person_ids: Vec<usize>,
    /// 1-based rank of the first correct match, if any.
    pub first_match: Option<usize>,
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub queries: Vec<QueryResult>,
    /// `cmc[k - 1]`: fraction of valid queries with a correct match within
    /// the top `k`, for `k = 1..=gallery size`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_valid_queries: usize,
}

impl RetrievalReport {
    /// CMC at rank `k` (1-based); ranks past the gallery size saturate.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }
}

/// Standard reporting ranks.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Evaluates embedded queries against an embedded gallery.
pub fn evaluate(
    queries: &[GalleryEntry],
    gallery: &[GalleryEntry],
    mode: DistanceMode,
) -> Result<RetrievalReport> {
    let mut dist = Vec::with_capacity(queries.len());
    for q in queries {
        let row = gallery
            .iter()
            .map(|g| distance(&q.embedding, &g.embedding, mode))
            .collect::<Result<Vec<_>>>()?;
        dist.push(row);
    }
    let qm: Vec<ItemMeta> = queries.iter().map(|q| q.meta).collect();
    let gm: Vec<ItemMeta> = gallery.iter().map(|g| g.meta).collect();
    evaluate_distances(&dist, &qm, &gm)
}

/// Evaluates a precomputed `[queries x gallery]` distance matrix.
///
/// Gallery items sharing both identity and camera with the query are
/// removed; the rest are ranked by ascending distance, ties by video id.
/// Queries without any remaining correct match are counted but excluded
/// from CMC and mAP.
pub fn evaluate_distances(
    dist: &[Vec<f64>],
    queries: &[ItemMeta],
    gallery: &[ItemMeta],
) -> Result<RetrievalReport> {
    if dist.len() != queries.len() || dist.iter().any(|r| r.len() != gallery.len()) {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            left: vec![dist.len(), dist.first().map_or(0, |r| r.len())],
            right: vec![queries.len(), gallery.len()],
        });
    }
    let mut results = Vec::with_capacity(queries.len());
    let mut hits_at = vec![0usize; gallery.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for (q, row) in queries.iter().zip(dist) {
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&g| {
                !(gallery[g].person_id == q.person_id && gallery[g].camera_id == q.camera_id)
            })
            .collect();
        order.sort_by(|&a, &b| {
            row[a]
                .total_cmp(&row[b])
                .then(gallery[a].video_id.cmp(&gallery[b].video_id))
        });
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &g) in order.iter().enumerate() {
            if gallery[g].person_id == q.person_id {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first.get_or_insert(pos + 1);
            }
        }
        let ap = first.map(|_| precision_sum / hits as f64);
        if let (Some(r), Some(ap)) = (first, ap) {
            valid += 1;
            hits_at[r - 1] += 1;
            ap_sum += ap;
        }
        results.push(QueryResult {
            query: *q,
            ranked_video_ids: order.iter().map(|&g| gallery[g].video_id).collect(),
            ranked_person_ids: order.iter().map(|&g| gallery[g].person_id).collect(),
            first_match: first,
            average_precision: ap,
        });
    }
    if valid == 0 {
        return Err(Error::NoValidQueries);
    }
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut cumulative = 0;
    for h in hits_at {
        cumulative += h;
        cmc.push(cumulative as f64 / valid as f64);
    }
    Ok(RetrievalReport {
        queries: results,
        cmc,
        map: ap_sum / valid as f64,
        num_queries: queries.len(),
        num_valid_queries: valid,
    })
}

/// Per-trial reports and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialsReport {
    pub trials: Vec<RetrievalReport>,
    /// Element-wise mean CMC over trials, truncated to the shortest curve.
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl TrialsReport {
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }
}

/// Averages CMC curves and mAP over reports.
pub fn average(reports: Vec<RetrievalReport>) -> Result<TrialsReport> {
    if reports.is_empty() {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let n = reports.len() as f64;
    let len = reports.iter().map(|r| r.cmc.len()).min().unwrap_or(0);
    let cmc = (0..len)
        .map(|k| reports.iter().map(|r| r.cmc[k]).sum::<f64>() / n)
        .collect();
    let map = reports.iter().map(|r| r.map).sum::<f64>() / n;
    Ok(TrialsReport {
        trials: reports,
        cmc,
        map,
    })
}

/// Randomly halves the identities `num_trials` times and averages the
/// reports returned by `run(trial, train_ids, test_ids)`. Splits depend only
/// on `seed` and the trial index.
pub fn repeated_trials(
    identities: &[usize],
    num_trials: usize,
    seed: u64,
    mut run: impl FnMut(usize, &[usize], &[usize]) -> Result<RetrievalReport>,
) -> Result<TrialsReport> {
    if num_trials == 0 {
        return Err(Error::Config("num_trials must be at least 1".into()));
    }
    let mut ids = identities.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Config(format!(
            "{} identities cannot be split into two halves",
            ids.len()
        )));
    }
    let mut reports = Vec::with_capacity(num_trials);
    for trial in 0..num_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng);
        let (train, test) = shuffled.split_at(ids.len() / 2);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        reports.push(run(trial, &train, &test)?);
    }
    average(reports)
}
