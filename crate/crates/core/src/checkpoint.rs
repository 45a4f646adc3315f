//! Checkpoint serialization.
//!
//! Little-endian binary layout:
//! magic `"TMCK"`, u32 version, length-prefixed UTF-8 model spec, u32 epoch,
//! f64 best validation loss, RNG state (32-byte seed, u128 word position,
//! u64 stream), then the parameter blobs and optimizer state blobs, each as
//! `(name, kind, dims, f32 data)`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::{AnyModel, ModelSpec};
use crate::param::{ParamKind, ParameterStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized RNG state of the training loop (ChaCha8).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

/// Optimizer state snapshot: the global step count plus one array per
/// moment buffer, keyed `"<buffer>.<param name>"`.
#[derive(Debug, Clone, Default)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub entries: Vec<(String, ArrayD<f32>)>,
}

/// Everything needed to rebuild a training run at its best epoch.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub params: ParameterStore<f32>,
    pub optimizer: OptimizerSnapshot,
    pub best_val_loss: f64,
    pub epoch: u32,
    pub rng: RngState,
}

impl Checkpoint {
    /// Instantiate the model this checkpoint describes and load its weights.
    pub fn build_model(&self) -> Result<AnyModel<f32>> {
        let mut model = self.model.build::<f32>(0)?;
        self.params.load_into(&mut model)?;
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let spec = ckpt.model.to_text();
    out.write_u32::<LittleEndian>(spec.len() as u32)?;
    out.extend_from_slice(spec.as_bytes());
    out.write_u32::<LittleEndian>(ckpt.epoch)?;
    out.write_f64::<LittleEndian>(ckpt.best_val_loss)?;
    out.extend_from_slice(&ckpt.rng.seed);
    out.write_u128::<LittleEndian>(ckpt.rng.word_pos)?;
    out.write_u64::<LittleEndian>(ckpt.rng.stream)?;

    out.write_u32::<LittleEndian>(ckpt.params.entries().len() as u32)?;
    for (name, value, kind) in ckpt.params.entries() {
        write_blob(&mut out, name, value, *kind)?;
    }
    out.write_u64::<LittleEndian>(ckpt.optimizer.step)?;
    out.write_u32::<LittleEndian>(ckpt.optimizer.entries.len() as u32)?;
    for (name, value) in &ckpt.optimizer.entries {
        write_blob(&mut out, name, value, ParamKind::Trainable)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor::new(bytes.as_slice());

    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let version = read_u32(&mut cur)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let spec_len = read_u32(&mut cur)? as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    read_exact(&mut cur, &mut spec_bytes)?;
    let spec_text = String::from_utf8(spec_bytes)
        .map_err(|_| Error::Checkpoint("model spec is not UTF-8".to_string()))?;
    let model = ModelSpec::from_text(&spec_text)?;

    let epoch = read_u32(&mut cur)?;
    let best_val_loss = cur
        .read_f64::<LittleEndian>()
        .map_err(|_| truncated())?;
    let mut seed = [0u8; 32];
    read_exact(&mut cur, &mut seed)?;
    let word_pos = cur.read_u128::<LittleEndian>().map_err(|_| truncated())?;
    let stream = cur.read_u64::<LittleEndian>().map_err(|_| truncated())?;

    let n_params = read_u32(&mut cur)? as usize;
    let mut params = ParameterStore::default();
    for _ in 0..n_params {
        let (name, value, kind) = read_blob(&mut cur)?;
        params.push(name, value, kind);
    }
    let opt_step = cur.read_u64::<LittleEndian>().map_err(|_| truncated())?;
    let n_opt = read_u32(&mut cur)? as usize;
    let mut entries = Vec::with_capacity(n_opt);
    for _ in 0..n_opt {
        let (name, value, _) = read_blob(&mut cur)?;
        entries.push((name, value));
    }
    if cur.position() != bytes.len() as u64 {
        return Err(Error::Checkpoint("trailing bytes".to_string()));
    }
    Ok(Checkpoint {
        model,
        params,
        optimizer: OptimizerSnapshot {
            step: opt_step,
            entries,
        },
        best_val_loss,
        epoch,
        rng: RngState {
            seed,
            word_pos,
            stream,
        },
    })
}

fn write_blob(out: &mut Vec<u8>, name: &str, value: &ArrayD<f32>, kind: ParamKind) -> Result<()> {
    out.write_u32::<LittleEndian>(name.len() as u32)?;
    out.extend_from_slice(name.as_bytes());
    out.push(match kind {
        ParamKind::Trainable => 0,
        ParamKind::RunningStat => 1,
    });
    out.write_u32::<LittleEndian>(value.ndim() as u32)?;
    for &d in value.shape() {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in value.iter() {
        out.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_blob(cur: &mut Cursor<&[u8]>) -> Result<(String, ArrayD<f32>, ParamKind)> {
    let name_len = read_u32(cur)? as usize;
    if name_len > 1 << 20 {
        return Err(Error::Checkpoint("implausible name length".to_string()));
    }
    let mut name = vec![0u8; name_len];
    read_exact(cur, &mut name)?;
    let name =
        String::from_utf8(name).map_err(|_| Error::Checkpoint("name not UTF-8".to_string()))?;
    let mut kind_byte = [0u8; 1];
    read_exact(cur, &mut kind_byte)?;
    let kind = match kind_byte[0] {
        0 => ParamKind::Trainable,
        1 => ParamKind::RunningStat,
        k => return Err(Error::Checkpoint(format!("unknown param kind {k}"))),
    };
    let ndim = read_u32(cur)? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(cur)? as usize);
    }
    let len: usize = dims.iter().product();
    if len > 1 << 30 {
        return Err(Error::Checkpoint("implausible tensor size".to_string()));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(cur.read_f32::<LittleEndian>().map_err(|_| truncated())?);
    }
    let value = ArrayD::from_shape_vec(dims, data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?;
    Ok((name, value, kind))
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(|_| truncated())
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    cur.read_u32::<LittleEndian>().map_err(|_| truncated())
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::HasParams;
    use tempfile::tempdir;

    fn tiny_checkpoint() -> Checkpoint {
        let spec = ModelSpec::Basic { base_channels: 2 };
        let model = spec.build::<f32>(11).unwrap();
        Checkpoint {
            model: spec,
            params: ParameterStore::from_model(&model),
            optimizer: OptimizerSnapshot {
                step: 42,
                entries: vec![(
                    "m.head.weight".to_string(),
                    ArrayD::from_elem(vec![1, 2, 1, 1], 0.25f32),
                )],
            },
            best_val_loss: 0.46,
            epoch: 7,
            rng: RngState {
                seed: [9u8; 32],
                word_pos: 1234,
                stream: 1,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = tiny_checkpoint();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.tmck");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, ckpt.model);
        assert_eq!(back.epoch, 7);
        assert_eq!(back.best_val_loss, 0.46);
        assert_eq!(back.rng, ckpt.rng);
        assert_eq!(back.optimizer.step, 42);
        assert_eq!(back.params.entries().len(), ckpt.params.entries().len());
        for ((n1, v1, k1), (n2, v2, k2)) in
            back.params.entries().iter().zip(ckpt.params.entries())
        {
            assert_eq!(n1, n2);
            assert_eq!(k1, k2);
            assert_eq!(v1, v2); // bit-exact f32
        }
    }

    #[test]
    fn truncated_files_are_rejected() {
        let ckpt = tiny_checkpoint();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.tmck");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let path2 = dir.path().join("cut.tmck");
            std::fs::write(&path2, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path2), Err(Error::Checkpoint(_))),
                "cut at {cut} not rejected"
            );
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let ckpt = tiny_checkpoint();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.tmck");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rebuilt_model_reproduces_forward_outputs() {
        let spec = ModelSpec::Basic { base_channels: 2 };
        let mut model = spec.build::<f32>(5).unwrap();
        let x = ndarray::Array4::<f32>::from_elem((1, 3, 16, 16), 0.3);
        let y1 = model.forward(&x, crate::nn::Mode::Eval).unwrap();

        let ckpt = Checkpoint {
            model: spec,
            params: ParameterStore::from_model(&model),
            optimizer: OptimizerSnapshot::default(),
            best_val_loss: f64::INFINITY,
            epoch: 0,
            rng: RngState {
                seed: [0u8; 32],
                word_pos: 0,
                stream: 0,
            },
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tmck");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut rebuilt = load_checkpoint(&path).unwrap().build_model().unwrap();
        let y2 = rebuilt.forward(&x, crate::nn::Mode::Eval).unwrap();
        assert_eq!(y1, y2); // bit-exact
    }
}
