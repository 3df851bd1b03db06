//! In-memory video samples, the synthetic pedestrian dataset and PK batch
//! sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::Sampler;

/// Planar image, channel-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![channels, height, width],
                len: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// 8-bit planar samples, scaled by 1/255.
    pub fn from_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Planar 8-bit samples, rounding and clamping to `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// One pedestrian video (tracklet).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub video_id: usize,
    pub person_id: usize,
    pub camera_id: usize,
    pub frames: Vec<Image>,
}

impl VideoSample {
    pub fn validate(&self) -> Result<()> {
        let first = self.frames.first().ok_or(Error::EmptyVideo)?;
        if let Some(f) = self.frames.iter().find(|f| f.dims() != first.dims()) {
            return Err(Error::ImageDims {
                expected: first.dims(),
                got: f.dims(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Config(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Parameters of the synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub videos_per_id: usize,
    pub frames_per_video: usize,
    pub num_cameras: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Identities held out for the query/gallery splits; the rest train.
    pub test_ids: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_ids < 2 {
            return bad("synthetic data needs at least two identities");
        }
        if self.videos_per_id < 2 || self.num_cameras < 2 {
            return bad("every identity must appear under at least two cameras");
        }
        if self.frames_per_video == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("frame count and image dimensions must be positive");
        }
        if self.test_ids > 0 && self.num_ids - self.test_ids.min(self.num_ids) < 2 {
            return bad("at least two identities must remain for training");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    pub fn num_videos(&self) -> usize {
        self.num_ids * self.videos_per_id
    }

    pub fn num_frames(&self) -> usize {
        self.num_videos() * self.frames_per_video
    }
}

/// A generated video and its split tag.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedVideo {
    pub split: Split,
    pub sample: VideoSample,
}

const BLOCK_ROWS: usize = 4;
const BLOCK_COLS: usize = 2;
const CAMERA_BIAS: f64 = 0.05;
const MIN_PATTERN_RMS: f64 = 0.25;

/// Generates the synthetic dataset. Each identity owns a colour-block
/// layout (4 row bands x 2 column bands per channel, kept at least 0.25 RMS
/// away from every other identity); a video adds its camera's per-channel
/// bias and every frame adds independent pixel noise. Frames are quantised
/// to 8 bits, so writing and re-reading them is lossless.
///
/// Video `v` of identity `i` has id `i * videos_per_id + v` and camera
/// `(i + v) % num_cameras`. Held-out identities (the last `test_ids`) put
/// their first video in the query split and the rest in the gallery.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<TaggedVideo>> {
    spec.validate()?;
    let mut sampler = Sampler::new(spec.seed);
    let plane = spec.height * spec.width;
    let render = |levels: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(spec.channels * plane);
        for ch in 0..spec.channels {
            for r in 0..spec.height {
                for q in 0..spec.width {
                    let block = (r * BLOCK_ROWS / spec.height) * BLOCK_COLS + q * BLOCK_COLS / spec.width;
                    out.push(levels[ch * BLOCK_ROWS * BLOCK_COLS + block]);
                }
            }
        }
        out
    };
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(spec.num_ids);
    for _ in 0..spec.num_ids {
        let mut candidate = Vec::new();
        for _attempt in 0..1000 {
            let levels: Vec<f64> = (0..spec.channels * BLOCK_ROWS * BLOCK_COLS)
                .map(|_| 0.15 + 0.7 * sampler.uniform())
                .collect();
            candidate = render(&levels);
            if patterns.iter().all(|p| rms(p, &candidate) >= MIN_PATTERN_RMS) {
                break;
            }
        }
        patterns.push(candidate);
    }
    let biases: Vec<Vec<f64>> = (0..spec.num_cameras)
        .map(|_| {
            (0..spec.channels)
                .map(|_| CAMERA_BIAS * (2.0 * sampler.uniform() - 1.0))
                .collect()
        })
        .collect();
    let train_ids = spec.num_ids - spec.test_ids;
    let mut videos = Vec::with_capacity(spec.num_videos());
    for (person, pattern) in patterns.iter().enumerate() {
        for v in 0..spec.videos_per_id {
            let camera = (person + v) % spec.num_cameras;
            let frames = (0..spec.frames_per_video)
                .map(|_| {
                    let px: Vec<f64> = pattern
                        .iter()
                        .enumerate()
                        .map(|(i, &base)| {
                            let mut x = base + biases[camera][i / plane];
                            if spec.noise > 0.0 {
                                x += spec.noise * sampler.normal();
                            }
                            quantize(x) as f64 / 255.0
                        })
                        .collect();
                    Image::new(spec.channels, spec.height, spec.width, px)
                })
                .collect::<Result<Vec<_>>>()?;
            let split = if person < train_ids {
                Split::Train
            } else if v == 0 {
                Split::Query
            } else {
                Split::Gallery
            };
            videos.push(TaggedVideo {
                split,
                sample: VideoSample {
                    video_id: person * spec.videos_per_id + v,
                    person_id: person,
                    camera_id: camera,
                    frames,
                },
            });
        }
    }
    Ok(videos)
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    libm::sqrt(s / a.len() as f64)
}

/// Maps arbitrary person ids to dense class labels `0..L` in ascending id
/// order. Returns the per-sample labels and the id of each label.
pub fn dense_labels(person_ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut ids = person_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let labels = person_ids
        .iter()
        .map(|p| ids.binary_search(p).expect("present"))
        .collect();
    (labels, ids)
}

/// Draws `P` identities x `Q` videos per batch. Identities with fewer than
/// `Q` videos are sampled with replacement.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_label: Vec<Vec<usize>>,
    p: usize,
    q: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    /// `labels[i]` is the dense class label of sample `i`.
    pub fn new(labels: &[usize], p: usize, q: usize, seed: u64) -> Result<Self> {
        if p < 2 || q < 2 {
            return Err(Error::InvalidBatch(format!(
                "P={p}, Q={q}: batch-hard mining needs P >= 2 and Q >= 2"
            )));
        }
        let num_labels = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_label = vec![Vec::new(); num_labels];
        for (i, &l) in labels.iter().enumerate() {
            by_label[l].push(i);
        }
        let present = by_label.iter().filter(|v| !v.is_empty()).count();
        if present < p {
            return Err(Error::InvalidBatch(format!(
                "{present} identities available, P={p} required"
            )));
        }
        by_label.retain(|v| !v.is_empty());
        Ok(Self {
            by_label,
            p,
            q,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.q
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_label.len() / self.p
    }

    /// Identity groups (by position among present labels) with fewer than
    /// `Q` samples.
    pub fn undersized(&self) -> Vec<usize> {
        self.by_label
            .iter()
            .enumerate()
            .filter(|(_, v)| v.len() < self.q)
            .map(|(i, _)| i)
            .collect()
    }

    /// One epoch of batches; each batch lists `P * Q` sample indices,
    /// grouped by identity.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.by_label.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for group in order.chunks_exact(self.p) {
            let mut batch = Vec::with_capacity(self.batch_size());
            for &g in group {
                let pool = &self.by_label[g];
                if pool.len() >= self.q {
                    let mut pick = pool.clone();
                    pick.shuffle(&mut self.rng);
                    batch.extend_from_slice(&pick[..self.q]);
                } else {
                    for _ in 0..self.q {
                        batch.push(pool[self.rng.gen_range(0..pool.len())]);
                    }
                }
            }
            batches.push(batch);
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_ids: 4,
            videos_per_id: 4,
            frames_per_video: 8,
            num_cameras: 2,
            channels: 1,
            height: 40,
            width: 28,
            noise: 0.05,
            test_ids: 0,
            seed: 5,
        }
    }

    #[test]
    fn counts() {
        let v = generate(&spec()).unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(v.iter().map(|t| t.sample.frames.len()).sum::<usize>(), 128);
        for id in 0..4 {
            let cams: Vec<_> = v
                .iter()
                .filter(|t| t.sample.person_id == id)
                .map(|t| t.sample.camera_id)
                .collect();
            assert!(cams.contains(&0) && cams.contains(&1));
        }
    }

    #[test]
    fn noiseless_same_camera_frames_are_identical() {
        let mut s = spec();
        s.noise = 0.0;
        let v = generate(&s).unwrap();
        // videos 0 and 2 of identity 0 share camera 0
        assert_eq!(v[0].sample.camera_id, v[2].sample.camera_id);
        assert_eq!(v[0].sample.frames, v[2].sample.frames);
        assert_eq!(v[0].sample.frames[0], v[0].sample.frames[7]);
    }

    #[test]
    fn seeded_generation_repeats() {
        assert_eq!(generate(&spec()).unwrap(), generate(&spec()).unwrap());
    }

    #[test]
    fn held_out_identities_get_query_and_gallery() {
        let mut s = spec();
        s.num_ids = 6;
        s.test_ids = 2;
        let v = generate(&s).unwrap();
        let query: Vec<_> = v.iter().filter(|t| t.split == Split::Query).collect();
        assert_eq!(query.len(), 2);
        assert_eq!(v.iter().filter(|t| t.split == Split::Gallery).count(), 6);
        assert!(query.iter().all(|t| t.sample.person_id >= 4));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.num_cameras = 1;
        assert!(generate(&s).is_err());
        let mut s = spec();
        s.num_ids = 1;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn pk_batches_have_p_ids_and_q_videos() {
        let labels: Vec<usize> = (0..16).map(|i| i / 4).collect();
        let mut s = PkSampler::new(&labels, 2, 2, 9).unwrap();
        assert_eq!(s.batches_per_epoch(), 2);
        for batch in s.epoch() {
            assert_eq!(batch.len(), 4);
            let ls: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            assert_eq!(ls[0], ls[1]);
            assert_eq!(ls[2], ls[3]);
            assert_ne!(ls[0], ls[2]);
            assert_ne!(batch[0], batch[1]);
        }
        let mut a = PkSampler::new(&labels, 2, 2, 9).unwrap();
        let mut b = PkSampler::new(&labels, 2, 2, 9).unwrap();
        assert_eq!(a.epoch(), b.epoch());
        assert_eq!(a.epoch(), b.epoch());
    }

    #[test]
    fn pk_undersized_identities_sample_with_replacement() {
        let labels = [0, 0, 0, 1];
        let mut s = PkSampler::new(&labels, 2, 3, 1).unwrap();
        assert_eq!(s.undersized(), vec![1]);
        let batch = &s.epoch()[0];
        assert_eq!(batch.len(), 6);
        assert!(batch.contains(&3));
        assert!(PkSampler::new(&labels, 3, 2, 1).is_err());
        assert!(PkSampler::new(&labels, 2, 1, 1).is_err());
    }

    #[test]
    fn dense_label_mapping() {
        let (labels, ids) = dense_labels(&[7, 3, 7, 10]);
        assert_eq!(labels, vec![1, 0, 1, 2]);
        assert_eq!(ids, vec![3, 7, 10]);
    }
}
