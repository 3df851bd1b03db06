//! Patch embedding and the initial token sequence.
//!
//! A strided convolution maps the image to an `h x w x c` feature map whose
//! row-major flattening gives the patch tokens `p_1..p_N` (top-left first,
//! rows before columns). The class token is prepended and scaled position
//! and camera embeddings are added.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::init::Sampler;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub embed_dim: usize,
    /// Weight of the position embedding.
    pub lambda1: f64,
    /// Weight of the camera embedding.
    pub lambda2: f64,
    pub num_cameras: usize,
    /// Pixels are mapped to `(x - pixel_mean) / pixel_std` before the
    /// convolution.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl EmbedConfig {
    /// Patch grid `(h, w)` produced by the convolution.
    pub fn grid(&self) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "kernel ({}) and stride ({}) must be positive",
                self.kernel, self.stride
            )));
        }
        if self.image_height < self.kernel || self.image_width < self.kernel {
            return Err(Error::Config(format!(
                "image {}x{} is smaller than the {}x{} kernel",
                self.image_height, self.image_width, self.kernel, self.kernel
            )));
        }
        Ok((
            (self.image_height - self.kernel) / self.stride + 1,
            (self.image_width - self.kernel) / self.stride + 1,
        ))
    }

    pub fn num_patches(&self) -> Result<usize> {
        let (h, w) = self.grid()?;
        Ok(h * w)
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Embedding parameters, generic over the handle type ([`ParamId`] in the
/// store, [`Var`] once bound to a tape).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedParams<T> {
    /// `[c, channels, k, k]`
    pub conv_weight: T,
    /// `[c]`
    pub conv_bias: T,
    /// `[1, c]`
    pub class_token: T,
    /// `[N + 1, c]`; row 0 belongs to the class token.
    pub position: T,
    /// `[num_cameras, c]`
    pub camera: T,
}

impl<T: Copy> EmbedParams<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> EmbedParams<U> {
        EmbedParams {
            conv_weight: f(self.conv_weight),
            conv_bias: f(self.conv_bias),
            class_token: f(self.class_token),
            position: f(self.position),
            camera: f(self.camera),
        }
    }
}

impl EmbedParams<ParamId> {
    /// Truncated-normal (std 0.02) convolution and embeddings, zero class
    /// token and bias.
    pub fn init(store: &mut ParamStore, sampler: &mut Sampler, cfg: &EmbedConfig) -> Result<Self> {
        let n = cfg.num_patches()?;
        let c = cfg.embed_dim;
        let g = ParamGroup::Backbone;
        Ok(Self {
            conv_weight: store.add(
                "embed.conv.weight",
                sampler.trunc_normal_tensor(&[c, cfg.channels, cfg.kernel, cfg.kernel], 0.02),
                g,
            ),
            conv_bias: store.add("embed.conv.bias", Tensor::zeros(&[c]), g),
            class_token: store.add("embed.class_token", Tensor::zeros(&[1, c]), g),
            position: store.add(
                "embed.position",
                sampler.trunc_normal_tensor(&[n + 1, c], 0.02),
                g,
            ),
            camera: store.add(
                "embed.camera",
                sampler.trunc_normal_tensor(&[cfg.num_cameras, c], 0.02),
                g,
            ),
        })
    }
}

/// Unfolds the image into `[N, channels * k * k]` patch rows in scan order.
/// Columns run over (channel, kernel row, kernel column).
pub fn im2col(image: &Image, cfg: &EmbedConfig) -> Result<Tensor> {
    let expected = (cfg.channels, cfg.image_height, cfg.image_width);
    let got = (image.channels(), image.height(), image.width());
    if expected != got {
        return Err(Error::ImageDims { expected, got });
    }
    let (h, w) = cfg.grid()?;
    let (k, s) = (cfg.kernel, cfg.stride);
    let plane = cfg.image_height * cfg.image_width;
    let px = image.data();
    let mut out = Vec::with_capacity(h * w * cfg.patch_len());
    for r in 0..h {
        for q in 0..w {
            for ch in 0..cfg.channels {
                for i in 0..k {
                    let row = ch * plane + (r * s + i) * cfg.image_width + q * s;
                    out.extend(
                        px[row..row + k]
                            .iter()
                            .map(|v| (v - cfg.pixel_mean) / cfg.pixel_std),
                    );
                }
            }
        }
    }
    Tensor::new(vec![h * w, cfg.patch_len()], out)
}

/// Convolution feature map `f: [h, w, c]`.
pub fn patchify(
    tape: &mut Tape<'_>,
    image: &Image,
    params: &EmbedParams<Var>,
    cfg: &EmbedConfig,
) -> Result<Var> {
    let (h, w) = cfg.grid()?;
    let patches = tape.leaf(im2col(image, cfg)?, false);
    let weight = tape.reshape(params.conv_weight, &[cfg.embed_dim, cfg.patch_len()])?;
    let weight = tape.transpose(weight)?;
    let f = tape.matmul(patches, weight)?;
    let f = tape.add_row(f, params.conv_bias)?;
    tape.reshape(f, &[h, w, cfg.embed_dim])
}

/// `z0 = [cls; p_1; ..; p_N] + lambda1 * pos + lambda2 * cam`, where the
/// camera row is broadcast to all `N + 1` positions.
pub fn assemble_z0(
    tape: &mut Tape<'_>,
    feature_map: Var,
    camera: usize,
    params: &EmbedParams<Var>,
    cfg: &EmbedConfig,
) -> Result<Var> {
    if camera >= cfg.num_cameras {
        return Err(Error::CameraOutOfRange {
            camera,
            num_cameras: cfg.num_cameras,
        });
    }
    let n = cfg.num_patches()?;
    let tokens = tape.reshape(feature_map, &[n, cfg.embed_dim])?;
    let seq = tape.concat_rows(&[params.class_token, tokens])?;
    let pos = tape.scale(params.position, cfg.lambda1);
    let seq = tape.add(seq, pos)?;
    let cam = tape.gather_rows(params.camera, &[camera])?;
    let cam = tape.scale(cam, cfg.lambda2);
    tape.add_row(seq, cam)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: usize, w: usize) -> EmbedConfig {
        EmbedConfig {
            image_height: h,
            image_width: w,
            channels: 1,
            kernel: 16,
            stride: 12,
            embed_dim: 4,
            lambda1: 1.0,
            lambda2: 1.5,
            num_cameras: 2,
            pixel_mean: 0.0,
            pixel_std: 1.0,
        }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(cfg(256, 128).grid().unwrap(), (21, 10));
        assert_eq!(cfg(256, 128).num_patches().unwrap(), 210);
        assert_eq!(cfg(40, 28).grid().unwrap(), (3, 2));
        assert_eq!(cfg(16, 16).grid().unwrap(), (1, 1));
        assert!(cfg(15, 16).grid().is_err());
    }

    fn ramp_image(c: &EmbedConfig) -> Image {
        let n = c.channels * c.image_height * c.image_width;
        Image::new(
            c.channels,
            c.image_height,
            c.image_width,
            (0..n).map(|i| (i % 97) as f64 / 97.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_patch_is_full_image_convolution() {
        let c = cfg(16, 16);
        let img = ramp_image(&c);
        let mut store = ParamStore::new();
        let p = EmbedParams::init(&mut store, &mut Sampler::new(1), &c).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let f = patchify(&mut tape, &img, &p.map(|id| b[id]), &c).unwrap();
        assert_eq!(tape.shape(f), &[1, 1, 4]);
        let w = store.get(p.conv_weight).data();
        for o in 0..4 {
            let direct: f64 = (0..256).map(|i| w[o * 256 + i] * img.data()[i]).sum();
            assert!((tape.data(f)[o] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_rows_follow_scan_order() {
        let c = cfg(40, 28);
        let img = ramp_image(&c);
        let cols = im2col(&img, &c).unwrap();
        assert_eq!(cols.shape(), &[6, 256]);
        // patch 3 (p_4) is grid cell (1, 1): top-left pixel at (12, 12)
        assert_eq!(cols.data()[3 * 256], img.data()[12 * 28 + 12]);
    }

    #[test]
    fn z0_without_embedding_weights_is_raw_sequence() {
        let mut c = cfg(40, 28);
        c.lambda1 = 0.0;
        c.lambda2 = 0.0;
        let img = ramp_image(&c);
        let mut store = ParamStore::new();
        let p = EmbedParams::init(&mut store, &mut Sampler::new(2), &c).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let pv = p.map(|id| b[id]);
        let f = patchify(&mut tape, &img, &pv, &c).unwrap();
        let z0 = assemble_z0(&mut tape, f, 1, &pv, &c).unwrap();
        assert_eq!(tape.shape(z0), &[7, 4]);
        assert_eq!(&tape.data(z0)[..4], store.get(p.class_token).data());
        assert_eq!(&tape.data(z0)[4..], tape.data(f));
    }

    #[test]
    fn camera_enters_as_row_constant_offset() {
        let c = cfg(40, 28);
        let img = ramp_image(&c);
        let mut store = ParamStore::new();
        let p = EmbedParams::init(&mut store, &mut Sampler::new(3), &c).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let pv = p.map(|id| b[id]);
        let f = patchify(&mut tape, &img, &pv, &c).unwrap();
        let z_a = assemble_z0(&mut tape, f, 0, &pv, &c).unwrap();
        let z_b = assemble_z0(&mut tape, f, 1, &pv, &c).unwrap();
        let cam = store.get(p.camera).data();
        for (i, (a, b)) in tape.data(z_a).iter().zip(tape.data(z_b)).enumerate() {
            let j = i % 4;
            let expected = 1.5 * (cam[j] - cam[4 + j]);
            assert!((a - b - expected).abs() < 1e-12);
        }
        assert!(matches!(
            assemble_z0(&mut tape, f, 2, &pv, &c),
            Err(Error::CameraOutOfRange { camera: 2, .. })
        ));
    }

    #[test]
    fn wrong_image_dims_rejected() {
        let c = cfg(40, 28);
        let img = Image::new(1, 40, 27, vec![0.0; 40 * 27]).unwrap();
        assert!(matches!(im2col(&img, &c), Err(Error::ImageDims { .. })));
    }
}
