//! Finite-difference checks of the full model.

use pit_core::data::{generate, SyntheticSpec, VideoSample};
use pit_core::init::Sampler;
use pit_core::model::{PitConfig, PitModel};
use pit_core::training::{batch_loss, loss_and_gradients};

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn toy_batch(frames: usize) -> (Vec<VideoSample>, Vec<usize>) {
    let spec = SyntheticSpec {
        num_ids: 2,
        videos_per_id: 2,
        frames_per_video: frames,
        num_cameras: 2,
        channels: 1,
        height: 40,
        width: 28,
        noise: 0.05,
        test_ids: 0,
        seed: 11,
    };
    let videos: Vec<VideoSample> = generate(&spec).unwrap().into_iter().map(|t| t.sample).collect();
    let labels = videos.iter().map(|v| v.person_id).collect();
    (videos, labels)
}

/// Default init leaves many gradients near 1e-7, where central differences
/// only resolve a few digits. Parameters are redrawn from U(-0.3, 0.3).
const PARAM_SCALE: f64 = 0.3;

/// Worst relative error over every scalar parameter of the model, and the
/// number of scalars checked.
pub fn model_gradient_error(mut cfg: PitConfig) -> (f64, usize) {
    cfg.keyframes = 2;
    let (videos, labels) = toy_batch(2);
    let batch: Vec<&VideoSample> = videos.iter().collect();
    let mut model = PitModel::new(cfg, 2).unwrap();
    let mut s = Sampler::new(99);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for x in model.store.get_mut(id).data_mut() {
            *x = PARAM_SCALE * (2.0 * s.uniform() - 1.0);
        }
    }
    let (_, grads, _) = loss_and_gradients(&model, &batch, &labels, |_| true).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let analytic = grads[id.index()].clone().unwrap();
        for i in 0..model.store.get(id).len() {
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + STEP;
            let up = batch_loss(&model, &batch, &labels).unwrap().total;
            model.store.get_mut(id).data_mut()[i] = orig - STEP;
            let down = batch_loss(&model, &batch, &labels).unwrap().total;
            model.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

