//! On-disk datasets: `manifest.txt` plus frame files under `frames/`.
//!
//! Manifest grammar, one record per line after the header:
//!
//! ```text
//! # pit-manifest 1
//! <video_id> <person_id> <camera_id> <split> <frame path> [<frame path> ...]
//! ```
//!
//! Fields are separated by single spaces, `split` is `train`, `query` or
//! `gallery`, and frame paths are relative to the manifest's directory.
//! Video ids run `0..n` in line order and person ids are dense from 0.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use pit_core::data::{dense_labels, PkSampler, Split, TaggedVideo, VideoSample};

use crate::error::{io_err, Error, Result};
use crate::pnm;

pub const MANIFEST_HEADER: &str = "# pit-manifest 1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub video_id: usize,
    pub person_id: usize,
    pub camera_id: usize,
    pub split: Split,
    pub frames: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    msg: format!("missing `{MANIFEST_HEADER}` header"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let fail = |msg: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() < 5 {
                return Err(fail(format!(
                    "expected `video_id person_id camera_id split frame..`, found `{line}`"
                )));
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| fail(format!("invalid {what} `{s}`")))
            };
            records.push(Record {
                video_id: num(fields[0], "video id")?,
                person_id: num(fields[1], "person id")?,
                camera_id: num(fields[2], "camera id")?,
                split: fields[3].parse().map_err(|e: pit_core::Error| fail(e.to_string()))?,
                frames: fields[4..].iter().map(PathBuf::from).collect(),
            });
        }
        let manifest = Self { records };
        manifest.check().map_err(|msg| Error::Format {
            path: path.into(),
            msg,
        })?;
        Ok(manifest)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.records.is_empty() {
            return Err("manifest lists no videos".into());
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.video_id != i {
                return Err(format!("video id {} on record {i}; ids must run 0..n in order", r.video_id));
            }
        }
        let people: BTreeSet<usize> = self.records.iter().map(|r| r.person_id).collect();
        if people.iter().enumerate().any(|(i, &p)| i != p) {
            return Err("person ids must be dense from 0".into());
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{} {} {} {}", r.video_id, r.person_id, r.camera_id, r.split));
            for f in &r.frames {
                s.push(' ');
                s.push_str(&f.to_string_lossy());
            }
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(io_err(path))
    }
}

/// Source of video samples. A loader for another benchmark only needs to
/// produce records and decode their frames.
pub trait DatasetAdapter {
    fn records(&self) -> &[Record];
    fn load_video(&self, record: &Record) -> Result<VideoSample>;

    /// Videos of one split, in record order.
    fn load_split(&self, split: Split) -> Result<Vec<VideoSample>> {
        self.records()
            .iter()
            .filter(|r| r.split == split)
            .map(|r| self.load_video(r))
            .collect()
    }
}

/// A dataset directory in the manifest format.
#[derive(Clone, Debug)]
pub struct DirDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DirDataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.into(),
            manifest: Manifest::read(&root.join(MANIFEST_FILE))?,
        })
    }
}

impl DatasetAdapter for DirDataset {
    fn records(&self) -> &[Record] {
        &self.manifest.records
    }

    fn load_video(&self, record: &Record) -> Result<VideoSample> {
        let frames = record
            .frames
            .iter()
            .map(|f| pnm::read(&self.root.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let video = VideoSample {
            video_id: record.video_id,
            person_id: record.person_id,
            camera_id: record.camera_id,
            frames,
        };
        video.validate().map_err(|e| Error::Format {
            path: self.root.join(MANIFEST_FILE),
            msg: format!("video {}: {e}", record.video_id),
        })?;
        Ok(video)
    }
}

/// Writes frames as `frames/<video_id>/<frame_idx>.<pgm|ppm>` and the
/// manifest.
pub fn write_dataset(root: &Path, videos: &[TaggedVideo]) -> Result<Manifest> {
    let mut records = Vec::with_capacity(videos.len());
    for v in videos {
        let s = &v.sample;
        let rel = PathBuf::from("frames").join(s.video_id.to_string());
        let dir = root.join(&rel);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut frames = Vec::with_capacity(s.frames.len());
        for (i, f) in s.frames.iter().enumerate() {
            let name = format!("{i}.{}", pnm::extension(f.channels())?);
            pnm::write(&dir.join(&name), f)?;
            frames.push(PathBuf::from(format!("frames/{}/{name}", s.video_id)));
        }
        records.push(Record {
            video_id: s.video_id,
            person_id: s.person_id,
            camera_id: s.camera_id,
            split: v.split,
            frames,
        });
    }
    let manifest = Manifest { records };
    manifest.check().map_err(|msg| Error::Format {
        path: root.join(MANIFEST_FILE),
        msg,
    })?;
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Training videos with dense class labels and a seeded PK sampler.
pub struct TrainLoader {
    pub videos: Vec<VideoSample>,
    pub labels: Vec<usize>,
    /// Person id of each class label.
    pub person_ids: Vec<usize>,
    pub sampler: PkSampler,
}

impl TrainLoader {
    pub fn new(videos: Vec<VideoSample>, p: usize, q: usize, seed: u64) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Invalid("no training videos".into()));
        }
        let (labels, person_ids) =
            dense_labels(&videos.iter().map(|v| v.person_id).collect::<Vec<_>>());
        let sampler = PkSampler::new(&labels, p, q, seed)?;
        Ok(Self {
            videos,
            labels,
            person_ids,
            sampler,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.person_ids.len()
    }

    /// Person ids with fewer than `Q` videos; they are sampled with
    /// replacement.
    pub fn undersized_ids(&self) -> Vec<usize> {
        self.sampler
            .undersized()
            .into_iter()
            .map(|l| self.person_ids[l])
            .collect()
    }

    /// One epoch of batches, each a list of `(video, label)` pairs.
    pub fn epoch(&mut self) -> Vec<Vec<(&VideoSample, usize)>> {
        let batches = self.sampler.epoch();
        batches
            .into_iter()
            .map(|b| b.into_iter().map(|i| (&self.videos[i], self.labels[i])).collect())
            .collect()
    }
}
