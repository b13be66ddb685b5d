//! Binary checkpoint: the magic `VDCKPT1`, a `u32` tensor count, then per
//! tensor `u32` name length, name bytes, `u32` rank and `u64` dims; then the
//! row-major `f32` little-endian data of every tensor in manifest order.
//!
//! The first tensor is `meta.config`, a rank-1 tensor holding the model
//! configuration.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{init_base_model, BlockParam, LoraAdapter, LoraPart, Model, ModelConfig, ParamId, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"VDCKPT1";
const META: &str = "meta.config";

fn config_tensor(cfg: &ModelConfig) -> Vec<f32> {
    [cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq, cfg.v_orig, cfg.v_ext]
        .iter()
        .map(|&v| v as f32)
        .collect()
}

/// Serialises a model (converted to `f32`).
pub fn write_checkpoint<F: Scalar>(model: &Model<F>, mut out: impl Write) -> Result<()> {
    let ids = model.param_ids();
    let mut manifest: Vec<(String, Vec<usize>)> = vec![(META.into(), vec![7])];
    for id in &ids {
        let p = model.param(*id).expect("listed id");
        let dims = if p.nrows() == 1 && is_vector(*id) {
            vec![p.ncols()]
        } else {
            vec![p.nrows(), p.ncols()]
        };
        manifest.push((id.name(), dims));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, dims) in &manifest {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in config_tensor(&model.config) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for id in &ids {
        for &x in model.param(*id).expect("listed id").iter() {
            let v: f32 = num_traits::cast(x).expect("finite parameter");
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn is_vector(id: ParamId) -> bool {
    match id {
        ParamId::FinalNormGain | ParamId::FinalNormBias => true,
        ParamId::Block(_, p) => !p.is_linear(),
        _ => false,
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. Every tensor of the configured model must be present
/// exactly once; adapter tensors re-create the adapters.
pub fn read_checkpoint(mut input: impl Read) -> Result<Model<f32>> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n = cur.u32()? as usize;
    let mut manifest = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}")));
        }
        let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, dims));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, dims) in manifest {
        let (r, c) = if dims.len() == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let count = r.checked_mul(c).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let bytes = cur.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let vals: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, Array2::from_shape_vec((r, c), vals).expect("sized")));
    }
    if cur.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let mut iter = tensors.into_iter();
    let (name, meta) = iter.next().ok_or_else(|| Error::Checkpoint("empty manifest".into()))?;
    if name != META || meta.len() != 7 {
        return Err(Error::Checkpoint(format!("first tensor must be {META}")));
    }
    let m: Vec<usize> = meta.iter().map(|&v| v as usize).collect();
    let config = ModelConfig {
        d_model: m[0],
        n_layers: m[1],
        n_heads: m[2],
        d_ff: m[3],
        max_seq: m[4],
        v_orig: m[5],
        v_ext: m[6],
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model: Model<f32> = init_base_model(config, 0)?;
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in iter {
        let id = ParamId::parse(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if !seen.insert(id) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        if let ParamId::Lora(i, p, part) = id {
            let block = model
                .blocks
                .get_mut(i)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: no block {i}")))?;
            let entry = block.lora.entry(p).or_insert_with(|| LoraAdapter {
                a: Array2::zeros((0, 0)),
                b: Array2::zeros((0, 0)),
            });
            match part {
                LoraPart::A => entry.a = t,
                LoraPart::B => entry.b = t,
            }
            continue;
        }
        let slot = model
            .param_mut(id)
            .ok_or_else(|| Error::Checkpoint(format!("{name} does not fit the configuration")))?;
        if slot.dim() != t.dim() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                t.dim(),
                slot.dim()
            )));
        }
        *slot = t;
    }
    for id in model.param_ids() {
        if !seen.contains(&id) {
            return Err(Error::Checkpoint(format!("missing tensor {id}")));
        }
    }
    for (i, b) in model.blocks.iter().enumerate() {
        for (p, ad) in &b.lora {
            check_adapter(i, *p, b.get(*p).dim(), ad)?;
        }
    }
    Ok(model)
}

fn check_adapter(i: usize, p: BlockParam, (d, k): (usize, usize), ad: &LoraAdapter<f32>) -> Result<()> {
    let r = ad.a.nrows();
    if r == 0 || ad.a.dim() != (r, k) || ad.b.dim() != (d, r) {
        return Err(Error::Checkpoint(format!(
            "adapter block.{i}.{} has shapes {:?} / {:?}",
            p.name(),
            ad.a.dim(),
            ad.b.dim()
        )));
    }
    Ok(())
}

pub fn save_checkpoint<F: Scalar>(model: &Model<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let file = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(file))
}
