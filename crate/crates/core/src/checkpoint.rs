//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CODECLM\0"
//! version  u32
//! length   u64      header byte count
//! header   JSON     configs, alphabet, step, seed, tensor and moment index
//! payload  bytes    weights in their dtype, then optimizer moments as f64
//! ```
//!
//! The header records the SHA-256 of the payload. Writes go to a temporary
//! file in the target directory that is then renamed over the target.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{CodecLm, ModelConfig};
use crate::error::{Error, Result};
use crate::text::CharVocab;
use crate::training::{Moments, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CODECLM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub len: u64,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub alphabet: String,
    pub dtype: String,
    /// Completed optimisation steps.
    pub step: u64,
    /// Root of every per-step random stream; with `step` this is the full
    /// training RNG state.
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
    pub moments: Vec<MomentEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

/// Everything besides the weights that a checkpoint carries.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<(u64, Vec<Moments>)>,
}

pub struct Loaded {
    pub model: CodecLm,
    pub state: TrainState,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn bytes_tensor(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let device = &candle_core::Device::Cpu;
    Ok(match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        _ => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
    })
}

fn f64_bytes(v: &[f64]) -> impl Iterator<Item = u8> + '_ {
    v.iter().flat_map(|x| x.to_le_bytes())
}

pub fn save_checkpoint(path: &Path, model: &CodecLm, state: &TrainState) -> Result<()> {
    let dtype = model.dtype();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for p in model.store().params() {
        let bytes = tensor_bytes(p.var.as_tensor())?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.var.dims().to_vec(),
            offset: payload.len() as u64,
            bytes: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let mut moments = Vec::new();
    if let Some((_, list)) = &state.optimizer {
        for m in list {
            moments.push(MomentEntry {
                name: m.name.clone(),
                len: m.m.len() as u64,
                offset: payload.len() as u64,
            });
            payload.extend(f64_bytes(&m.m));
            payload.extend(f64_bytes(&m.v));
        }
    }
    let header = CheckpointHeader {
        model: *model.config(),
        alphabet: model.text_encoder().chars().alphabet().iter().collect(),
        dtype: dtype_name(dtype)?.to_string(),
        step: state.step,
        seed: state.seed,
        train: state.train.clone(),
        optimizer_step: state.optimizer.as_ref().map(|(s, _)| *s),
        tensors,
        moments,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;

    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&payload)?;
        let file = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn read_preamble(r: &mut impl Read) -> Result<CheckpointHeader> {
    let magic = read_exact(r, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_exact(r, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(read_exact(r, 8, "header length")?.try_into().expect("8 bytes"));
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let header = read_exact(r, len as usize, "header")?;
    serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
}

/// Reads only the header; weights are not touched.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    read_preamble(&mut BufReader::new(File::open(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_preamble(&mut r)?;
    let payload = read_exact(&mut r, header.payload_bytes as usize, "payload")?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    if hex(&Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let dtype = parse_dtype(&header.dtype)?;
    let chars = CharVocab::new(header.alphabet.chars());
    let model = CodecLm::new(header.model, chars, header.seed, dtype)?;
    let params = model.store().params();
    if params.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            header.tensors.len(),
            params.len()
        )));
    }
    let slice = |offset: u64, bytes: u64| -> Result<&[u8]> {
        let (a, b) = (offset as usize, (offset + bytes) as usize);
        payload
            .get(a..b)
            .ok_or_else(|| Error::Checkpoint("tensor outside payload".into()))
    };
    for (p, e) in params.iter().zip(&header.tensors) {
        if p.name != e.name || p.var.dims() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model parameter {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.var.dims()
            )));
        }
        let expected = p.var.elem_count() as u64 * dtype.size_in_bytes() as u64;
        if e.bytes != expected {
            return Err(Error::Checkpoint(format!("tensor {} has {} bytes", e.name, e.bytes)));
        }
        p.var.set(&bytes_tensor(slice(e.offset, e.bytes)?, &e.shape, dtype)?)?;
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut list = Vec::with_capacity(header.moments.len());
            for e in &header.moments {
                let bytes = slice(e.offset, e.len * 16)?;
                let (m, v) = bytes.split_at(e.len as usize * 8);
                let decode = |b: &[u8]| -> Vec<f64> {
                    b.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect()
                };
                list.push(Moments {
                    name: e.name.clone(),
                    m: decode(m),
                    v: decode(v),
                });
            }
            Some((step, list))
        }
        None => None,
    };
    Ok(Loaded {
        model,
        state: TrainState {
            step: header.step,
            seed: header.seed,
            train: header.train,
            optimizer,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{DecoderSequence, TokenStep};
    use crate::vocab::TokenVocabulary;

    fn model(seed: u64) -> CodecLm {
        let vocab = TokenVocabulary::new(20, 8, 3).unwrap();
        CodecLm::new(ModelConfig::micro(vocab), CharVocab::from_texts(["ab cd"]), seed, DType::F32).unwrap()
    }

    fn probe(m: &CodecLm) -> Vec<f32> {
        let text = m.text_encoder().encode_text("ab c", 16).unwrap().valid_vectors().unwrap();
        let seq = DecoderSequence {
            text,
            steps: vec![TokenStep::St(3), TokenStep::St(20), TokenStep::At(vec![1, 8, 8])],
        };
        m.hidden_states(&[seq]).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(5);
        let state = TrainState {
            step: 7,
            seed: 5,
            train: Some(TrainConfig::default()),
            optimizer: Some((
                7,
                vec![Moments {
                    name: "norm".into(),
                    m: vec![0.1, -2.5e-300],
                    v: vec![3.0, f64::MIN_POSITIVE],
                }],
            )),
        };
        save_checkpoint(&path, &m, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let a: Vec<u32> = probe(&m).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = probe(&loaded.model).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_ne!(probe(&model(6)), probe(&m));
        assert_eq!(loaded.state.step, 7);
        assert_eq!(loaded.state.optimizer, state.optimizer);
        assert_eq!(loaded.state.train, state.train);
        assert_eq!(loaded.model.config(), m.config());
    }

    #[test]
    fn version_checked_before_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(1), &TrainState::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        // drop the weights entirely: the version error must still win
        bytes.truncate(20);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(1), &TrainState::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
