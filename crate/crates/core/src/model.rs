//! The assembled network: patch embedding, shared trunk, feature pyramid,
//! video fusion and per-branch BatchNorm/classifier heads.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{Image, VideoSample};
use crate::division::{Direction, DivisionSpec, ResolvedDivision};
use crate::embed::{assemble_z0, patchify, EmbedConfig, EmbedParams};
use crate::error::{Error, Result};
use crate::init::Sampler;
use crate::params::{Bound, Param, ParamGroup, ParamId, ParamStore};
use crate::pyramid::{
    build_pyramid, build_pyramid_with_attention, init_heads, BranchLabel, FeaturePyramid,
    HeadLayers,
};
use crate::retrieval::{DistanceMode, Embedding};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{BnState, BranchHeadParams};
use crate::transformer::{init_trunk, run_trunk, EncoderLayerParams, TransformerConfig};
use crate::video::{fuse, select_keyframes, VideoPyramid};

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct PitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub num_cameras: usize,
    pub pixel_mean: f64,
    pub pixel_std: f64,
    /// Trunk depth `m`.
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub ln_eps: f64,
    /// LayerNorm between trunk and pyramid.
    pub trailing_norm: bool,
    pub division: DivisionSpec,
    /// Encoder layers per pyramid layer.
    pub head_depth: usize,
    /// Keyframes per video, `K`.
    pub keyframes: usize,
    pub batch_p: usize,
    pub batch_q: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
    pub distance: DistanceMode,
}

impl PitConfig {
    /// ViT-B/16-sized model on 256x128 frames with the
    /// `1x210_105x2_3x70_6p` pyramid.
    pub fn full() -> Self {
        Self {
            image_height: 256,
            image_width: 128,
            channels: 3,
            kernel: 16,
            stride: 12,
            embed_dim: 768,
            lambda1: 1.0,
            lambda2: 1.5,
            num_cameras: 6,
            pixel_mean: 0.0,
            pixel_std: 1.0,
            depth: 11,
            num_heads: 12,
            mlp_dim: 3072,
            ln_eps: 1e-6,
            trailing_norm: false,
            division: "1x210_105x2_3x70_6p".parse().expect("valid division"),
            head_depth: 1,
            keyframes: 8,
            batch_p: 4,
            batch_q: 4,
            lr: 0.01,
            momentum: 0.9,
            epochs: 120,
            freeze_epochs: 5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
            distance: DistanceMode::Concat,
        }
    }

    /// Desk-scale model: 40x28 grayscale frames, 3x2 token grid, `c = 8`,
    /// two trunk layers.
    pub fn toy() -> Self {
        Self {
            image_height: 40,
            image_width: 28,
            channels: 1,
            embed_dim: 8,
            num_cameras: 2,
            depth: 2,
            num_heads: 2,
            mlp_dim: 32,
            division: "1x6_3x2_3x2h_6p".parse().expect("valid division"),
            keyframes: 4,
            epochs: 200,
            ..Self::full()
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            channels: self.channels,
            kernel: self.kernel,
            stride: self.stride,
            embed_dim: self.embed_dim,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            num_cameras: self.num_cameras,
            pixel_mean: self.pixel_mean,
            pixel_std: self.pixel_std,
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            mlp_dim: self.mlp_dim,
            ln_eps: self.ln_eps,
        }
    }

    /// Checks every constraint and resolves the division on the token grid.
    pub fn validate(&self) -> Result<ResolvedDivision> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.channels == 0 || self.embed_dim == 0 || self.num_cameras == 0 {
            return bad("channels, embed_dim and num_cameras must be positive".into());
        }
        if self.keyframes == 0 {
            return bad("keyframes must be positive".into());
        }
        if self.head_depth == 0 {
            return bad("head_depth must be at least 1".into());
        }
        if self.batch_p < 2 || self.batch_q < 2 {
            return Err(Error::InvalidBatch(format!(
                "P={}, Q={}: both must be at least 2",
                self.batch_p, self.batch_q
            )));
        }
        if !(self.pixel_std > 0.0) || !(self.ln_eps >= 0.0) || !(self.bn_eps > 0.0) {
            return bad("pixel_std and bn_eps must be positive, ln_eps non-negative".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be non-negative and momentum in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        self.transformer_config().validate()?;
        let (h, w) = self.embed_config().grid()?;
        self.division.resolve(h, w)
    }
}

/// A model with its parameters, running BatchNorm statistics and resolved
/// division.
#[derive(Clone, Debug, PartialEq)]
pub struct PitModel {
    pub config: PitConfig,
    pub num_classes: usize,
    pub division: ResolvedDivision,
    pub store: ParamStore,
    pub embed: EmbedParams<ParamId>,
    pub trunk: Vec<EncoderLayerParams<ParamId>>,
    pub trailing_norm: Option<(ParamId, ParamId)>,
    pub heads: Vec<HeadLayers<ParamId>>,
    pub branches: Vec<BranchHeadParams<ParamId>>,
    pub bn: Vec<BnState>,
}

/// Model parameters registered on a tape.
pub struct BoundModel {
    pub params: Bound,
    pub embed: EmbedParams<Var>,
    pub trunk: Vec<EncoderLayerParams<Var>>,
    pub trailing_norm: Option<(Var, Var)>,
    pub heads: Vec<HeadLayers<Var>>,
    pub branches: Vec<BranchHeadParams<Var>>,
}

impl PitModel {
    /// Initialises all parameters from `config.seed`.
    pub fn new(config: PitConfig, num_classes: usize) -> Result<Self> {
        let division = config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let tcfg = config.transformer_config();
        let mut store = ParamStore::new();
        let mut sampler = Sampler::new(config.seed);
        let embed = EmbedParams::init(&mut store, &mut sampler, &config.embed_config())?;
        let trunk = init_trunk(&mut store, &mut sampler, config.depth, &tcfg);
        let c = config.embed_dim;
        let trailing_norm = config.trailing_norm.then(|| {
            (
                store.add("trunk.norm.gain", Tensor::full(&[c], 1.0), ParamGroup::Backbone),
                store.add("trunk.norm.bias", Tensor::zeros(&[c]), ParamGroup::Backbone),
            )
        });
        let heads = init_heads(&mut store, &mut sampler, &division, config.head_depth, &tcfg);
        let branches = (0..division.num_branches())
            .map(|i| BranchHeadParams::init(&mut store, &mut sampler, i, c, num_classes))
            .collect();
        let bn = (0..division.num_branches()).map(|_| BnState::new(c)).collect();
        Ok(Self {
            config,
            num_classes,
            division,
            store,
            embed,
            trunk,
            trailing_norm,
            heads,
            branches,
            bn,
        })
    }

    pub fn num_branches(&self) -> usize {
        self.division.num_branches()
    }

    /// Branch labels in pyramid order.
    pub fn branch_labels(&self) -> Vec<BranchLabel> {
        let mut labels = Vec::with_capacity(self.num_branches());
        for (li, layer) in self.division.layers.iter().enumerate() {
            for part in 1..=layer.parts.len() {
                labels.push(BranchLabel {
                    layer: li,
                    direction: layer.layer.direction,
                    part,
                });
            }
        }
        labels
    }

    /// Binds all parameters, tracking gradients for those accepted by
    /// `trainable`.
    pub fn bind<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        trainable: impl Fn(&Param) -> bool,
    ) -> BoundModel {
        let params = self.store.bind_with(tape, trainable);
        let v = |id: ParamId| params[id];
        BoundModel {
            embed: self.embed.map(v),
            trunk: self.trunk.iter().map(|l| l.map(v)).collect(),
            trailing_norm: self.trailing_norm.map(|(g, b)| (v(g), v(b))),
            heads: self
                .heads
                .iter()
                .map(|h| h.iter().map(|l| l.map(v)).collect())
                .collect(),
            branches: self.branches.iter().map(|b| b.map(v)).collect(),
            params,
        }
    }

    /// Trunk output `z^m: [N + 1, c]`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        image: &Image,
        camera: usize,
    ) -> Result<Var> {
        let ecfg = self.config.embed_config();
        let tcfg = self.config.transformer_config();
        let f = patchify(tape, image, &bound.embed, &ecfg)?;
        let z0 = assemble_z0(tape, f, camera, &bound.embed, &ecfg)?;
        let z = run_trunk(tape, z0, &bound.trunk, &tcfg)?;
        match bound.trailing_norm {
            Some((g, b)) => tape.layer_norm(z, g, b, self.config.ln_eps),
            None => Ok(z),
        }
    }

    /// Per-image pyramid (pre-BatchNorm class tokens).
    pub fn forward_image(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        image: &Image,
        camera: usize,
    ) -> Result<FeaturePyramid> {
        let z = self.encode(tape, bound, image, camera)?;
        build_pyramid(
            tape,
            z,
            &self.division,
            &bound.heads,
            &self.config.transformer_config(),
        )
    }

    /// Video pyramid: mean of the keyframe pyramids.
    pub fn forward_video(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        video: &VideoSample,
    ) -> Result<VideoPyramid> {
        video.validate()?;
        let frames = select_keyframes(video.frames.len(), self.config.keyframes)?;
        let pyramids = frames
            .iter()
            .map(|&i| self.forward_image(tape, bound, &video.frames[i], video.camera_id))
            .collect::<Result<Vec<_>>>()?;
        fuse(tape, &pyramids)
    }

    /// Evaluation embedding: fused pyramid passed through each branch's
    /// BatchNorm with running statistics.
    pub fn embed_video(&self, video: &VideoSample) -> Result<Embedding> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let pyramid = self.forward_video(&mut tape, &bound, video)?;
        let branches = pyramid
            .features()
            .zip(&self.branches)
            .zip(&self.bn)
            .map(|((f, head), bn)| {
                bn.normalize(
                    tape.data(f),
                    self.store.get(head.bn_gain).data(),
                    self.store.get(head.bn_bias).data(),
                    self.config.bn_eps,
                )
            })
            .collect();
        Ok(Embedding { branches })
    }

    /// Class-token attention of every branch on the `h x w` token grid.
    ///
    /// Uses the last head layer of each pyramid layer, averages the heads,
    /// drops the class token's own weight, renormalises over the part's
    /// tokens and scatters them to their grid positions (other cells 0).
    pub fn attention_maps(&self, image: &Image, camera: usize) -> Result<Vec<AttentionMap>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let z = self.encode(&mut tape, &bound, image, camera)?;
        let out = build_pyramid_with_attention(
            &mut tape,
            z,
            &self.division,
            &bound.heads,
            &self.config.transformer_config(),
        )?;
        let (h, w) = (self.division.height, self.division.width);
        let parts = self.division.layers.iter().flat_map(|l| l.parts.iter());
        let mut maps = Vec::with_capacity(out.attention.len());
        for ((label, attn), tokens) in out
            .pyramid
            .labels()
            .zip(&out.attention)
            .zip(parts)
        {
            let attn = attn.ok_or(Error::StructureMismatch)?;
            let shape = tape.shape(attn);
            let (heads, len) = (shape[0], shape[2]);
            let data = tape.data(attn);
            let mut mean = alloc::vec![0.0; len];
            for hd in 0..heads {
                for (m, &a) in mean.iter_mut().zip(&data[hd * len..(hd + 1) * len]) {
                    *m += a / heads as f64;
                }
            }
            let total: f64 = mean[1..].iter().sum();
            let mut grid = alloc::vec![0.0; h * w];
            for (&t, &a) in tokens.iter().zip(&mean[1..]) {
                grid[t] = a / total;
            }
            maps.push(AttentionMap {
                label,
                height: h,
                width: w,
                values: grid,
            });
        }
        Ok(maps)
    }
}

/// Attention of one branch over the token grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub label: BranchLabel,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn is_global(&self) -> bool {
        self.label.direction == Direction::Global
    }
}
