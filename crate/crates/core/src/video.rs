//! Keyframe selection and video-level fusion of per-image pyramids.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tape;

/// Video-level pyramid: entry-wise mean of the keyframe pyramids.
pub type VideoPyramid = FeaturePyramid;

/// Splits `num_frames` into `k` contiguous snippets (lengths differ by at
/// most one) and returns the first frame index of each. Videos shorter than
/// `k` are padded by repeating the last frame.
pub fn select_keyframes(num_frames: usize, k: usize) -> Result<Vec<usize>> {
    if num_frames == 0 {
        return Err(Error::EmptyVideo);
    }
    if k == 0 {
        return Err(Error::Config("keyframe count must be positive".into()));
    }
    if num_frames < k {
        return Ok((0..k).map(|i| i.min(num_frames - 1)).collect());
    }
    Ok((0..k).map(|i| i * num_frames / k).collect())
}

/// Entry-wise arithmetic mean over the keyframe pyramids.
pub fn fuse(tape: &mut Tape<'_>, pyramids: &[FeaturePyramid]) -> Result<VideoPyramid> {
    let first = pyramids.first().ok_or(Error::EmptyVideo)?;
    if pyramids
        .iter()
        .any(|p| p.len() != first.len() || !p.labels().eq(first.labels()))
    {
        return Err(Error::StructureMismatch);
    }
    let mut entries = Vec::with_capacity(first.len());
    for (i, (label, _)) in first.entries.iter().enumerate() {
        let column: Vec<_> = pyramids.iter().map(|p| p.entries[i].1).collect();
        entries.push((*label, tape.mean_of(&column)?));
    }
    Ok(FeaturePyramid { entries })
}
