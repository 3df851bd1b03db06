//! Pre-norm transformer encoder layers:
//! `z' = z + MSA(LN(z))`, `out = z' + MLP(LN(z'))`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::init::Sampler;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub ln_eps: f64,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_dim == 0 {
            return Err(Error::Config("mlp_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One encoder layer. Projection weights are stored `[in, out]`; the query,
/// key and value matrices hold all heads side by side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T: Copy> EncoderLayerParams<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> EncoderLayerParams<U> {
        EncoderLayerParams {
            ln1_gain: f(self.ln1_gain),
            ln1_bias: f(self.ln1_bias),
            wq: f(self.wq),
            bq: f(self.bq),
            wk: f(self.wk),
            bk: f(self.bk),
            wv: f(self.wv),
            bv: f(self.bv),
            wo: f(self.wo),
            bo: f(self.bo),
            ln2_gain: f(self.ln2_gain),
            ln2_bias: f(self.ln2_bias),
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

impl EncoderLayerParams<ParamId> {
    pub fn init(
        store: &mut ParamStore,
        sampler: &mut Sampler,
        prefix: &str,
        cfg: &TransformerConfig,
        group: ParamGroup,
    ) -> Self {
        let (c, hidden) = (cfg.embed_dim, cfg.mlp_dim);
        let mut weight = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.add(
                format!("{prefix}.{name}"),
                sampler.trunc_normal_tensor(shape, 0.02),
                group,
            )
        };
        let wq = weight(store, "attn.wq", &[c, c]);
        let wk = weight(store, "attn.wk", &[c, c]);
        let wv = weight(store, "attn.wv", &[c, c]);
        let wo = weight(store, "attn.wo", &[c, c]);
        let w1 = weight(store, "mlp.w1", &[c, hidden]);
        let w2 = weight(store, "mlp.w2", &[hidden, c]);
        let mut fixed = |name: &str, len: usize, v: f64| {
            store.add(format!("{prefix}.{name}"), Tensor::full(&[len], v), group)
        };
        Self {
            ln1_gain: fixed("ln1.gain", c, 1.0),
            ln1_bias: fixed("ln1.bias", c, 0.0),
            wq,
            bq: fixed("attn.bq", c, 0.0),
            wk,
            bk: fixed("attn.bk", c, 0.0),
            wv,
            bv: fixed("attn.bv", c, 0.0),
            wo,
            bo: fixed("attn.bo", c, 0.0),
            ln2_gain: fixed("ln2.gain", c, 1.0),
            ln2_bias: fixed("ln2.bias", c, 0.0),
            w1,
            b1: fixed("mlp.b1", hidden, 0.0),
            w2,
            b2: fixed("mlp.b2", c, 0.0),
        }
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `[T, c] -> [heads, T, head_dim]`
fn split_heads(tape: &mut Tape<'_>, x: Var, cfg: &TransformerConfig) -> Result<Var> {
    let t = tape.shape(x)[0];
    let x = tape.reshape(x, &[t, cfg.num_heads, cfg.head_dim()])?;
    tape.permute(x, &[1, 0, 2])
}

/// Multi-head self-attention over the rows of `normed`. Queries come from
/// the first `query_rows` rows only. Returns the projected output
/// `[query_rows, c]` and the attention weights `[heads, query_rows, T]`.
fn self_attention(
    tape: &mut Tape<'_>,
    normed: Var,
    query_rows: usize,
    p: &EncoderLayerParams<Var>,
    cfg: &TransformerConfig,
) -> Result<(Var, Var)> {
    let t = tape.shape(normed)[0];
    let q_src = if query_rows == t {
        normed
    } else {
        tape.slice_rows(normed, 0, query_rows)?
    };
    let q = linear(tape, q_src, p.wq, p.bq)?;
    let k = linear(tape, normed, p.wk, p.bk)?;
    let v = linear(tape, normed, p.wv, p.bv)?;
    let q = split_heads(tape, q, cfg)?;
    let k = split_heads(tape, k, cfg)?;
    let v = split_heads(tape, v, cfg)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(cfg.head_dim() as f64));
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[query_rows, cfg.embed_dim])?;
    Ok((linear(tape, ctx, p.wo, p.bo)?, attn))
}

fn layer(
    tape: &mut Tape<'_>,
    z: Var,
    query_rows: usize,
    p: &EncoderLayerParams<Var>,
    cfg: &TransformerConfig,
) -> Result<(Var, Var)> {
    let shape = tape.shape(z);
    if shape.len() != 2 || shape[1] != cfg.embed_dim || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "encoder_layer",
            left: shape.to_vec(),
            right: alloc::vec![0, cfg.embed_dim],
        });
    }
    let normed = tape.layer_norm(z, p.ln1_gain, p.ln1_bias, cfg.ln_eps)?;
    let (msa, attn) = self_attention(tape, normed, query_rows, p, cfg)?;
    let residual = if query_rows == tape.shape(z)[0] {
        z
    } else {
        tape.slice_rows(z, 0, query_rows)?
    };
    let z1 = tape.add(residual, msa)?;
    let normed = tape.layer_norm(z1, p.ln2_gain, p.ln2_bias, cfg.ln_eps)?;
    let hidden = linear(tape, normed, p.w1, p.b1)?;
    let hidden = tape.gelu(hidden);
    let mlp = linear(tape, hidden, p.w2, p.b2)?;
    Ok((tape.add(z1, mlp)?, attn))
}

/// Full encoder layer, `[T, c] -> [T, c]`.
pub fn encoder_layer(
    tape: &mut Tape<'_>,
    z: Var,
    p: &EncoderLayerParams<Var>,
    cfg: &TransformerConfig,
) -> Result<Var> {
    Ok(encoder_layer_with_attention(tape, z, p, cfg)?.0)
}

/// Like [`encoder_layer`], also returning attention weights `[heads, T, T]`.
pub fn encoder_layer_with_attention(
    tape: &mut Tape<'_>,
    z: Var,
    p: &EncoderLayerParams<Var>,
    cfg: &TransformerConfig,
) -> Result<(Var, Var)> {
    let t = tape.shape(z).first().copied().unwrap_or(0);
    layer(tape, z, t, p, cfg)
}

/// Row 0 of [`encoder_layer`] without computing the other output rows.
/// Returns `[1, c]` and the class-token attention `[heads, 1, T]`.
pub fn encoder_layer_class_row(
    tape: &mut Tape<'_>,
    z: Var,
    p: &EncoderLayerParams<Var>,
    cfg: &TransformerConfig,
) -> Result<(Var, Var)> {
    layer(tape, z, 1, p, cfg)
}

/// Applies the trunk layers in order.
pub fn run_trunk(
    tape: &mut Tape<'_>,
    z0: Var,
    layers: &[EncoderLayerParams<Var>],
    cfg: &TransformerConfig,
) -> Result<Var> {
    layers
        .iter()
        .try_fold(z0, |z, p| encoder_layer(tape, z, p, cfg))
}

/// Initialises `depth` trunk layers named `trunk.<i>`.
pub fn init_trunk(
    store: &mut ParamStore,
    sampler: &mut Sampler,
    depth: usize,
    cfg: &TransformerConfig,
) -> Vec<EncoderLayerParams<ParamId>> {
    (0..depth)
        .map(|i| {
            EncoderLayerParams::init(
                store,
                sampler,
                &format!("trunk.{i}"),
                cfg,
                ParamGroup::Backbone,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            embed_dim: 8,
            num_heads: 2,
            mlp_dim: 32,
            ln_eps: 1e-6,
        }
    }

    fn random_input(sampler: &mut Sampler, t: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![t, c],
            (0..t * c).map(|_| sampler.uniform() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    fn setup() -> (ParamStore, EncoderLayerParams<ParamId>) {
        let mut store = ParamStore::new();
        let mut s = Sampler::new(11);
        let p = EncoderLayerParams::init(&mut store, &mut s, "l", &cfg(), ParamGroup::Backbone);
        // make the layer non-trivial
        for id in [p.bq, p.bk, p.bv, p.bo, p.b1, p.b2] {
            for v in store.get_mut(id).data_mut() {
                *v = s.uniform() - 0.5;
            }
        }
        for id in [p.wq, p.wk, p.wv, p.wo, p.w1, p.w2] {
            for v in store.get_mut(id).data_mut() {
                *v *= 20.0;
            }
        }
        (store, p)
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let (mut store, p) = setup();
        for id in [p.wo, p.bo, p.w2, p.b2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = random_input(&mut Sampler::new(1), 5, 8);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let z = tape.leaf(x.clone(), false);
        let y = encoder_layer(&mut tape, z, &p.map(|id| b[id]), &cfg()).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, p) = setup();
        let x = random_input(&mut Sampler::new(2), 1, 8);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let z = tape.leaf(x, false);
        let (y, attn) = encoder_layer_with_attention(&mut tape, z, &p.map(|id| b[id]), &cfg()).unwrap();
        assert_eq!(tape.shape(y), &[1, 8]);
        assert_eq!(tape.data(attn), &[1.0, 1.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, p) = setup();
        let x = random_input(&mut Sampler::new(3), 7, 8);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let z = tape.leaf(x, false);
        let (_, attn) = encoder_layer_with_attention(&mut tape, z, &p.map(|id| b[id]), &cfg()).unwrap();
        for row in tape.data(attn).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_permutation_equivariance() {
        let (store, p) = setup();
        let x = random_input(&mut Sampler::new(4), 6, 8);
        let perm = [0usize, 3, 5, 1, 2, 4];
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let pv = p.map(|id| b[id]);
        let z = tape.leaf(x, false);
        let zp = tape.gather_rows(z, &perm).unwrap();
        let y = encoder_layer(&mut tape, z, &pv, &cfg()).unwrap();
        let yp = encoder_layer(&mut tape, zp, &pv, &cfg()).unwrap();
        let y = tape.data(y).to_vec();
        let yp = tape.data(yp);
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp[i * 8 + j] - y[src * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_row_variant_matches_full_layer() {
        let (store, p) = setup();
        let x = random_input(&mut Sampler::new(5), 9, 8);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let pv = p.map(|id| b[id]);
        let z = tape.leaf(x, false);
        let (full, attn_full) = encoder_layer_with_attention(&mut tape, z, &pv, &cfg()).unwrap();
        let (row, attn_row) = encoder_layer_class_row(&mut tape, z, &pv, &cfg()).unwrap();
        for j in 0..8 {
            assert!((tape.data(full)[j] - tape.data(row)[j]).abs() < 1e-12);
        }
        for h in 0..2 {
            for t in 0..9 {
                let a = tape.data(attn_full)[h * 81 + t];
                assert!((a - tape.data(attn_row)[h * 9 + t]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_trunk_is_identity_and_shapes_are_preserved() {
        let mut store = ParamStore::new();
        let layers = init_trunk(&mut store, &mut Sampler::new(6), 2, &cfg());
        let x = random_input(&mut Sampler::new(7), 7, 8);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let bound: Vec<_> = layers.iter().map(|l| l.map(|id| b[id])).collect();
        let z = tape.leaf(x.clone(), false);
        let same = run_trunk(&mut tape, z, &[], &cfg()).unwrap();
        assert_eq!(same, z);
        let out = run_trunk(&mut tape, z, &bound, &cfg()).unwrap();
        assert_eq!(tape.shape(out), &[7, 8]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = cfg();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }
}
