//! Binary checkpoint container. All integers are little-endian `u64`
//! unless noted, floats little-endian IEEE-754 `f64`, strings are a length
//! followed by UTF-8 bytes.
//!
//! ```text
//! magic        8 bytes  "PITCKPT\0"
//! version      u32      1
//! config       string   the resolved key = value config
//! num_classes
//! epochs_done
//! steps                 optimizer steps taken
//! param_count
//!   name       string
//!   group      u8       0 backbone, 1 pyramid, 2 head
//!   rank, dims[rank]
//!   values     f64[product(dims)], row-major
//! branch_count
//!   width c, running_mean f64[c], running_var f64[c]
//! velocity_count        equals param_count
//!   present    u8       0 or 1
//!   values     length, f64[length]     (only when present)
//! metrics      string   key = value lines logged at save time
//! ```
//!
//! Loading rebuilds the model from the config and then checks every name,
//! group and shape against the stored tensors.

use std::fs;
use std::path::Path;

use pit_core::model::PitModel;
use pit_core::params::ParamGroup;
use pit_core::training::Sgd;

use crate::config::{parse_model_config, render_model_config};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"PITCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PitModel,
    pub sgd: Sgd,
    pub epochs_done: usize,
    pub metrics: String,
}

impl Checkpoint {
    /// Optimizer matching the model config, no state yet.
    pub fn fresh_sgd(model: &PitModel) -> Sgd {
        let c = &model.config;
        Sgd::new(c.lr, c.momentum, c.epochs, c.freeze_epochs)
    }
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Backbone => 0,
        ParamGroup::Pyramid => 1,
        ParamGroup::Head => 2,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.str(&render_model_config(&ck.model.config));
    w.u64(ck.model.num_classes);
    w.u64(ck.epochs_done);
    w.u64(ck.sgd.steps as usize);
    w.u64(ck.model.store.len());
    for p in ck.model.store.iter() {
        w.str(&p.name);
        w.0.push(group_code(p.group));
        w.u64(p.value.shape().len());
        for &d in p.value.shape() {
            w.u64(d);
        }
        w.f64s(p.value.data());
    }
    w.u64(ck.model.bn.len());
    for bn in &ck.model.bn {
        w.u64(bn.running_mean.len());
        w.f64s(&bn.running_mean);
        w.f64s(&bn.running_var);
    }
    w.u64(ck.model.store.len());
    for i in 0..ck.model.store.len() {
        match ck.sgd.velocity.get(i).and_then(|v| v.as_ref()) {
            Some(v) => {
                w.0.push(1);
                w.u64(v.len());
                w.f64s(v);
            }
            None => w.0.push(0),
        }
    }
    w.str(&ck.metrics);
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

type R<T> = std::result::Result<T, String>;

impl Reader<'_> {
    fn take(&mut self, n: usize) -> R<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> R<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> R<usize> {
        let b: [u8; 8] = self.take(8)?.try_into().expect("8 bytes");
        usize::try_from(u64::from_le_bytes(b)).map_err(|e| e.to_string())
    }

    fn f64s(&mut self, n: usize) -> R<Vec<f64>> {
        let len = n.checked_mul(8).ok_or("length overflow")?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn str(&mut self) -> R<String> {
        let n = self.u64()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Format {
        path: path.into(),
        msg,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(&fail)? != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4).map_err(&fail)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let config_text = r.str().map_err(&fail)?;
    let config = parse_model_config(&config_text, path)?;
    let num_classes = r.u64().map_err(&fail)?;
    let epochs_done = r.u64().map_err(&fail)?;
    let steps = r.u64().map_err(&fail)?;
    let mut model = PitModel::new(config, num_classes)?;
    let count = r.u64().map_err(&fail)?;
    if count != model.store.len() {
        return Err(fail(format!(
            "{count} tensors stored, the config defines {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = r.str().map_err(&fail)?;
        let group = r.u8().map_err(&fail)?;
        let rank = r.u64().map_err(&fail)?;
        let dims = (0..rank).map(|_| r.u64()).collect::<R<Vec<_>>>().map_err(&fail)?;
        let p = model.store.param(id);
        if name != p.name || group != group_code(p.group) || dims != p.value.shape() {
            return Err(fail(format!(
                "tensor `{name}` {dims:?} does not match `{}` {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let values = r.f64s(p.value.len()).map_err(&fail)?;
        model.store.get_mut(id).data_mut().copy_from_slice(&values);
    }
    let branches = r.u64().map_err(&fail)?;
    if branches != model.bn.len() {
        return Err(fail(format!("{branches} BatchNorm states, expected {}", model.bn.len())));
    }
    for bn in &mut model.bn {
        let c = r.u64().map_err(&fail)?;
        if c != bn.running_mean.len() {
            return Err(fail(format!("BatchNorm width {c}, expected {}", bn.running_mean.len())));
        }
        bn.running_mean = r.f64s(c).map_err(&fail)?;
        bn.running_var = r.f64s(c).map_err(&fail)?;
    }
    let mut sgd = Checkpoint::fresh_sgd(&model);
    sgd.steps = steps as u64;
    let vcount = r.u64().map_err(&fail)?;
    if vcount != model.store.len() {
        return Err(fail(format!("{vcount} velocity slots, expected {}", model.store.len())));
    }
    for id in model.store.ids() {
        let v = match r.u8().map_err(&fail)? {
            0 => None,
            1 => {
                let n = r.u64().map_err(&fail)?;
                if n != model.store.get(id).len() {
                    return Err(fail(format!("velocity of `{}` has length {n}", model.store.param(id).name)));
                }
                Some(r.f64s(n).map_err(&fail)?)
            }
            b => return Err(fail(format!("bad velocity flag {b}"))),
        };
        sgd.velocity.push(v);
    }
    let metrics = r.str().map_err(&fail)?;
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        sgd,
        epochs_done,
        metrics,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}
