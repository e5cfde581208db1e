//! Little-endian checkpoint files.
//!
//! Layout: magic `CS2N`, `u32` version, `u32` config-block length and the
//! config block, `u32` tensor count, then per tensor a `u16` name length,
//! the UTF-8 name, `u8` rank, `u32` dims and `f32` data. Optimizer moments
//! are stored as ordinary tensors named `adam.m/<path>` and `adam.v/<path>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelConfig, Network};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CS2N";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

const FLAG_SAB: u8 = 1;
const FLAG_CAB: u8 = 2;
const FLAG_CAPTURE: u8 = 4;
const FLAG_OPTIMIZER: u8 = 8;

/// Everything a checkpoint restores.
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub iteration: u64,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    optimizer: Option<&Adam<T>>,
    iteration: u64,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let c = model.config();
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;

    let mut block = Vec::new();
    block.write_u8(c.dims as u8)?;
    block.write_u32::<LE>(c.in_channels as u32)?;
    block.write_u32::<LE>(c.base_width as u32)?;
    block.write_u32::<LE>(c.levels as u32)?;
    let mut flags = 0;
    if c.sab {
        flags |= FLAG_SAB;
    }
    if c.cab {
        flags |= FLAG_CAB;
    }
    if c.capture_attention {
        flags |= FLAG_CAPTURE;
    }
    if optimizer.is_some() {
        flags |= FLAG_OPTIMIZER;
    }
    block.write_u8(flags)?;
    block.write_u64::<LE>(c.position_budget as u64)?;
    block.write_u64::<LE>(iteration)?;
    if let Some(opt) = optimizer {
        block.write_u64::<LE>(opt.step_count())?;
        for v in [opt.config.beta1, opt.config.beta2, opt.config.eps, opt.config.weight_decay] {
            block.write_f64::<LE>(v)?;
        }
    }
    w.write_u32::<LE>(block.len() as u32)?;
    w.write_all(&block)?;

    let mut tensors: Vec<(String, &[usize], Vec<f32>)> = Vec::new();
    for (_, name, t, _) in model.store.iter() {
        tensors.push((name.to_string(), t.dims(), t.data().iter().map(|v| v.as_f64() as f32).collect()));
    }
    if let Some(opt) = optimizer {
        for (id, name, t, _) in model.store.iter() {
            if let Some((m, v)) = opt.moments(id) {
                let f = |x: &[T]| x.iter().map(|v| v.as_f64() as f32).collect();
                tensors.push((format!("{M_PREFIX}{name}"), t.dims(), f(m)));
                tensors.push((format!("{V_PREFIX}{name}"), t.dims(), f(v)));
            }
        }
    }
    w.write_u32::<LE>(tensors.len() as u32)?;
    for (name, dims, data) in tensors {
        let bytes = name.as_bytes();
        w.write_u16::<LE>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(dims.len() as u8)?;
        for &d in dims {
            w.write_u32::<LE>(d as u32)?;
        }
        for v in data {
            w.write_f32::<LE>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reader that tracks its byte offset for error messages.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn eof(&self, what: &str) -> Error {
        Error::parse(self.offset, format!("file ends inside {what}"))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|_| self.eof(what))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(self.bytes(2, what)?.as_slice().read_u16::<LE>()?)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(self.bytes(4, what)?.as_slice().read_u32::<LE>()?)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(self.bytes(8, what)?.as_slice().read_u64::<LE>()?)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4, what)?;
        let mut out = vec![0.0f32; n];
        raw.as_slice().read_f32_into::<LE>(&mut out)?;
        Ok(out)
    }
}

struct Raw {
    config: ModelConfig,
    iteration: u64,
    adam: Option<(u64, AdamConfig)>,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn read_raw(path: &Path) -> Result<Raw> {
    let mut r = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse(0, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            path: path.display().to_string(),
            message: format!("format version {version}, this build reads {CHECKPOINT_VERSION}"),
        });
    }
    let block_len = r.u32("config block length")? as usize;
    let block_start = r.offset;
    let dims = r.u8("config")? as usize;
    let in_channels = r.u32("config")? as usize;
    let base_width = r.u32("config")? as usize;
    let levels = r.u32("config")? as usize;
    let flags = r.u8("config")?;
    let position_budget = r.u64("config")? as usize;
    let iteration = r.u64("config")?;
    let adam = if flags & FLAG_OPTIMIZER != 0 {
        let step = r.u64("optimizer state")?;
        let mut v = [0.0; 4];
        for x in &mut v {
            *x = f64::from_bits(r.u64("optimizer state")?);
        }
        Some((step, AdamConfig { beta1: v[0], beta2: v[1], eps: v[2], weight_decay: v[3] }))
    } else {
        None
    };
    if r.offset - block_start != block_len as u64 {
        return Err(Error::parse(block_start, format!("config block length {block_len} does not match its contents")));
    }
    let config = ModelConfig {
        dims,
        in_channels,
        base_width,
        levels,
        sab: flags & FLAG_SAB != 0,
        cab: flags & FLAG_CAB != 0,
        capture_attention: flags & FLAG_CAPTURE != 0,
        position_budget,
    };
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset;
        let len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.bytes(len, "tensor name")?)
            .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?;
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32s(n, "tensor data")?;
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::parse(at, format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::parse(r.offset, "trailing bytes after the last tensor"));
    }
    Ok(Raw { config, iteration, adam, tensors })
}

/// Copy every parameter in `tensors` into `store`, requiring an exact match
/// of paths and shapes.
fn fill_store<T: Real>(store: &mut ParamStore<T>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let params: Vec<&(String, Tensor<f32>)> = tensors
        .iter()
        .filter(|(n, _)| !n.starts_with(M_PREFIX) && !n.starts_with(V_PREFIX))
        .collect();
    for (name, t) in &params {
        let Some(id) = store.id(name) else {
            return Err(Error::Incompatible {
                path: name.clone(),
                message: "parameter is not part of this model".into(),
            });
        };
        if store.get(id).dims() != t.dims() {
            return Err(Error::Incompatible {
                path: name.clone(),
                message: format!("checkpoint shape {:?}, model shape {:?}", t.dims(), store.get(id).dims()),
            });
        }
    }
    for (_, name, _, _) in store.iter() {
        if !params.iter().any(|(n, _)| n == name) {
            return Err(Error::Incompatible {
                path: name.to_string(),
                message: "parameter missing from checkpoint".into(),
            });
        }
    }
    for (name, t) in params {
        let id = store.id(name).expect("checked above");
        *store.get_mut(id) = t.cast();
    }
    Ok(())
}

/// Rebuild the model (and optimizer state, if saved) described by a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = read_raw(path)?;
    raw.config.validate()?;
    let mut store = ParamStore::new();
    // Initial values are overwritten below; the seed only fixes the layout.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let net = Network::build(&raw.config, &mut store, &mut rng)?;
    fill_store(&mut store, &raw.tensors)?;
    let optimizer = match raw.adam {
        Some((step, cfg)) => {
            let mut adam = Adam::new(cfg);
            adam.set_step_count(step);
            for (name, m) in &raw.tensors {
                let Some(path) = name.strip_prefix(M_PREFIX) else { continue };
                let id = store.id(path).filter(|&id| store.kind(id) == ParamKind::Trainable).ok_or_else(|| {
                    Error::Incompatible { path: name.clone(), message: "moment for unknown parameter".into() }
                })?;
                let v = raw
                    .tensors
                    .iter()
                    .find(|(n, _)| n.strip_prefix(V_PREFIX) == Some(path))
                    .ok_or_else(|| Error::Incompatible {
                        path: format!("{V_PREFIX}{path}"),
                        message: "second moment missing".into(),
                    })?;
                if m.dims() != store.get(id).dims() || v.1.dims() != store.get(id).dims() {
                    return Err(Error::Incompatible { path: name.clone(), message: "moment shape mismatch".into() });
                }
                adam.restore(step, id, m.data().to_vec(), v.1.data().to_vec());
            }
            Some(adam)
        }
        None => None,
    };
    Ok(Checkpoint { model: Model { net, store }, optimizer, iteration: raw.iteration })
}

/// Load parameters into an existing model. Fails, naming the first
/// offending path, if the checkpoint does not match the model exactly.
pub fn load_into<T: Real>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let raw = read_raw(path)?;
    fill_store(&mut model.store, &raw.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Forward, Mode};

    fn trained_a_bit() -> (Model<f32>, Adam<f32>) {
        let mut m = Model::<f32>::build(&ModelConfig::planar().with_base_width(2), 3).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let x = Tensor::from_vec(vec![1, 1, 16, 16], (0..256).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let mut f = Forward::new(&mut m.store, Mode::Train);
        let xv = f.input(x);
        let y = m.net.forward(&mut f, xv).unwrap();
        let l = f.tape.mean(y).unwrap();
        f.backward(l).unwrap();
        let grads = f.param_grads();
        drop(f);
        adam.step(&mut m.store, &grads, 1e-3).unwrap();
        (m, adam)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (mut m, adam) = trained_a_bit();
        save_checkpoint(&path, &m, Some(&adam), 17).unwrap();
        let mut ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.iteration, 17);
        for (id, name, t, _) in m.store.iter() {
            let other = ck.model.store.get(ck.model.store.id(name).unwrap());
            assert_eq!(t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       other.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), "{name}");
            assert_eq!(adam.moments(id).is_some(), ck.optimizer.as_ref().unwrap().moments(id).is_some());
        }
        let opt = ck.optimizer.as_ref().unwrap();
        assert_eq!(opt.step_count(), 1);
        let x = Tensor::full(vec![1, 1, 16, 16], 0.3f32).unwrap();
        let a = m.predict(&x).unwrap();
        let b = ck.model.predict(&x).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn mismatched_model_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, _) = trained_a_bit();
        save_checkpoint(&path, &m, None, 0).unwrap();
        let mut wider = Model::<f32>::build(&ModelConfig::planar().with_base_width(4), 0).unwrap();
        let err = load_into(&mut wider, &path).unwrap_err();
        match err {
            Error::Incompatible { path, .. } => assert_eq!(path, "encoder.0.conv1.weight"),
            e => panic!("unexpected {e}"),
        }
        let mut backbone = Model::<f32>::build(&ModelConfig::planar().with_base_width(2).with_attention(false, false), 0).unwrap();
        assert!(matches!(load_into(&mut backbone, &path), Err(Error::Incompatible { .. })));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, _) = trained_a_bit();
        save_checkpoint(&path, &m, None, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { offset: 0, .. })));
    }
}
