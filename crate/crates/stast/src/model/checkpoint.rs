//! Checkpoint file: little-endian binary, magic `STCK`, a format version
//! (1 = f32 payload, 2 = f64 payload), the serialized ModelConfig, then
//! named parameter blocks: u32 name length, UTF-8 name, u32 element count,
//! IEEE-754 floats. The tied projection appears exactly once, under its own
//! name. A training checkpoint appends an optimizer section: step counter,
//! RNG state, plan hash, and the two Adam moment buffers per parameter.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

use super::{Model, ModelConfig, ParamStore};

const MAGIC: &[u8; 4] = b"STCK";

/// Optimizer state and bookkeeping appended after the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub step: u64,
    pub rng: RngState,
    /// Fingerprint of the training plan; a resume under a different plan is
    /// rejected instead of silently diverging.
    pub plan_hash: u64,
    pub adam_m: ParamStore<F>,
    pub adam_v: ParamStore<F>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{}: non-UTF-8 name in checkpoint", self.path)))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_config(buf: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.n_layers_acoustic,
        cfg.n_layers_semantic,
        cfg.n_layers_decoder,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.d_feat,
        cfg.vocab_size,
    ] {
        put_u32(buf, v as u32);
    }
    buf.extend_from_slice(&cfg.dropout.to_le_bytes());
    buf.push(cfg.use_semantic_encoder as u8);
    buf.push(cfg.use_shrink as u8);
}

fn read_config(c: &mut Cursor) -> Result<ModelConfig> {
    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        *d = c.u32()? as usize;
    }
    let dropout = c.f64()?;
    let flags = c.take(2)?;
    Ok(ModelConfig {
        n_layers_acoustic: dims[0],
        n_layers_semantic: dims[1],
        n_layers_decoder: dims[2],
        d_model: dims[3],
        n_heads: dims[4],
        d_ff: dims[5],
        d_feat: dims[6],
        vocab_size: dims[7],
        dropout,
        use_semantic_encoder: flags[0] != 0,
        use_shrink: flags[1] != 0,
    })
}

fn write_store<F: Scalar>(buf: &mut Vec<u8>, store: &ParamStore<F>) {
    put_u32(buf, store.len() as u32);
    for (name, p) in store.iter() {
        put_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, p.values.len() as u32);
        for v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Read a parameter store, taking shapes from `shapes` (the inventory a
/// freshly constructed model of the stored config declares).
fn read_store<F: Scalar>(c: &mut Cursor, shapes: &ParamStore<F>, what: &str) -> Result<ParamStore<F>> {
    let n = c.u32()? as usize;
    if n != shapes.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{what}: {n} parameters stored, config implies {}",
            shapes.len()
        )));
    }
    let mut out = ParamStore::default();
    for _ in 0..n {
        let name = c.string()?;
        let count = c.u32()? as usize;
        let shape = shapes.get(&name).ok_or_else(|| {
            Error::CheckpointMismatch(format!("{what}: unexpected parameter {name:?}"))
        })?;
        if count != shape.rows * shape.cols {
            return Err(Error::CheckpointMismatch(format!(
                "{what}: {name} has {count} elements, config implies {}x{}",
                shape.rows, shape.cols
            )));
        }
        let bytes = c.take(count * F::BYTES)?;
        let values: Vec<F> = bytes.chunks_exact(F::BYTES).map(F::from_le_slice).collect();
        out.insert(name, shape.rows, shape.cols, values);
    }
    Ok(out)
}

fn header<F: Scalar>(cfg: &ModelConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, if F::BYTES == 4 { 1 } else { 2 });
    write_config(&mut buf, cfg);
    buf
}

fn open<'a, F: Scalar>(buf: &'a [u8], path: &Path) -> Result<(Cursor<'a>, ModelConfig)> {
    let mut c = Cursor { buf, pos: 0, path: path.display().to_string() };
    if c.take(4)? != MAGIC {
        return Err(Error::Format(format!("{}: missing STCK header", path.display())));
    }
    let version = c.u32()?;
    let expected = if F::BYTES == 4 { 1 } else { 2 };
    if version != expected {
        return Err(Error::CheckpointMismatch(format!(
            "format version {version} holds {}-bit floats, active precision wants version {expected}",
            if version == 1 { 32 } else { 64 }
        )));
    }
    let cfg = read_config(&mut c)?;
    cfg.validate()?;
    Ok((c, cfg))
}

pub fn save_model<F: Scalar>(path: &Path, model: &Model<F>) -> Result<()> {
    let mut buf = header::<F>(&model.cfg);
    write_store(&mut buf, &model.params);
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<Model<F>> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (mut c, cfg) = open::<F>(&buf, path)?;
    let skeleton: Model<F> = Model::new(cfg.clone(), 0)?;
    let params = read_store(&mut c, &skeleton.params, "model")?;
    if !c.done() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after model parameters (training checkpoint?)",
            path.display(),
            buf.len() - c.pos
        )));
    }
    Ok(Model::from_parts(cfg, params))
}

pub fn save_train<F: Scalar>(path: &Path, model: &Model<F>, state: &TrainState<F>) -> Result<()> {
    let mut buf = header::<F>(&model.cfg);
    write_store(&mut buf, &model.params);
    put_u64(&mut buf, state.step);
    let (seed, counter) = state.rng.parts();
    put_u64(&mut buf, seed);
    put_u64(&mut buf, counter);
    put_u64(&mut buf, state.plan_hash);
    write_store(&mut buf, &state.adam_m);
    write_store(&mut buf, &state.adam_v);
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_train<F: Scalar>(path: &Path) -> Result<(Model<F>, TrainState<F>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (mut c, cfg) = open::<F>(&buf, path)?;
    let skeleton: Model<F> = Model::new(cfg.clone(), 0)?;
    let params = read_store(&mut c, &skeleton.params, "model")?;
    let step = c.u64()?;
    let seed = c.u64()?;
    let counter = c.u64()?;
    let plan_hash = c.u64()?;
    let adam_m = read_store(&mut c, &skeleton.params, "adam.m")?;
    let adam_v = read_store(&mut c, &skeleton.params, "adam.v")?;
    if !c.done() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok((
        Model::from_parts(cfg, params),
        TrainState { step, rng: RngState::from_parts(seed, counter), plan_hash, adam_m, adam_v },
    ))
}
