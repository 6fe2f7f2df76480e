//! Weight and dataset files.
//!
//! Weight file, little-endian:
//!
//! ```text
//! magic     b"TTMW"
//! version   u32
//! config    input_dim, model_dim, heads, ff_dim, encoder_layers,
//!           decoder_layers, seq_len as u32; dropout, layernorm_eps as f64
//! count     u64 number of parameters
//! params    count × f64, tensors in declared order
//! checksum  32-byte SHA-256 of everything above
//! ```
//!
//! Dataset file: one sample per line,
//! `label;f_1,…,f_1036;f_1,…,f_1036;…` with `seq_len` timesteps. Labels are
//! written at full precision; features at single precision (shortest `f32`
//! text) and read back as `f32`, so a written sample reads back bit-exact
//! once its features have gone through [`quantize_features`].

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::model::{ModelConfig, ModelWeights};
use super::train::LabeledSample;
use super::ModelError;
use crate::matrix::FeatureVector;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TTMW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights(weights: &ModelWeights) -> Vec<u8> {
    let c = &weights.config;
    let mut buf = Vec::with_capacity(64 + weights.parameter_count() * 8);
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for v in [
        c.input_dim,
        c.model_dim,
        c.heads,
        c.ff_dim,
        c.encoder_layers,
        c.decoder_layers,
        c.seq_len,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.extend_from_slice(&c.layernorm_eps.to_le_bytes());
    buf.extend_from_slice(&(weights.parameter_count() as u64).to_le_bytes());
    weights.for_each_tensor(|_, t| {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| ModelError::ShapeMismatch("weight file truncated".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights, ModelError> {
    if bytes.len() < 4 + 32 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(ModelError::ChecksumMismatch);
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(ModelError::VersionMismatch(format!(
            "file version {version}, expected {WEIGHTS_VERSION}"
        )));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        input_dim: dims[0],
        model_dim: dims[1],
        heads: dims[2],
        ff_dim: dims[3],
        encoder_layers: dims[4],
        decoder_layers: dims[5],
        seq_len: dims[6],
        dropout: r.f64()?,
        layernorm_eps: r.f64()?,
    };
    let mut weights = ModelWeights::zeros(config)?;
    let count = r.u64()? as usize;
    if count != weights.parameter_count() {
        return Err(ModelError::ShapeMismatch(format!(
            "file holds {count} parameters, config implies {}",
            weights.parameter_count()
        )));
    }
    let mut result = Ok(());
    weights.for_each_tensor_mut(|_, t| {
        for v in t.iter_mut() {
            match r.f64() {
                Ok(x) => *v = x,
                Err(e) => {
                    if result.is_ok() {
                        result = Err(e);
                    }
                    return;
                }
            }
        }
    });
    result?;
    if r.pos != body.len() {
        return Err(ModelError::ShapeMismatch(
            "trailing bytes in weight file".into(),
        ));
    }
    Ok(weights)
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode_weights(weights))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights, ModelError> {
    decode_weights(&fs::read(path)?)
}

/// Loads weights and insists on a specific configuration.
pub fn load_weights_for(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ModelWeights, ModelError> {
    let weights = load_weights(path)?;
    if &weights.config != expected {
        return Err(ModelError::VersionMismatch(format!(
            "weight file config {:?} does not match {:?}",
            weights.config, expected
        )));
    }
    Ok(weights)
}

pub fn write_sample<W: Write>(out: &mut W, sample: &LabeledSample) -> std::io::Result<()> {
    write!(out, "{}", sample.label)?;
    for step in &sample.sequence {
        out.write_all(b";")?;
        for (i, v) in step.as_slice().iter().enumerate() {
            if i > 0 {
                out.write_all(b",")?;
            }
            write!(out, "{}", *v as f32)?;
        }
    }
    out.write_all(b"\n")
}

pub fn write_dataset<'a>(
    path: impl AsRef<Path>,
    samples: impl IntoIterator<Item = &'a LabeledSample>,
) -> Result<(), ModelError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        write_sample(&mut out, s)?;
    }
    out.flush()?;
    Ok(())
}

/// Rounds every feature to the nearest `f32`, the precision of dataset files.
pub fn quantize_features(features: &FeatureVector) -> FeatureVector {
    let values = features
        .as_slice()
        .iter()
        .map(|v| *v as f32 as f64)
        .collect();
    FeatureVector::from_vec(values).expect("same length")
}

fn parse_step(part: &str) -> Result<FeatureVector, String> {
    let values = part
        .split(',')
        .map(|v| v.parse::<f32>().map(f64::from))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    FeatureVector::from_vec(values).map_err(|e| e.to_string())
}

fn parse_line(
    line: &str,
    line_no: usize,
    step: &mut dyn FnMut(&str) -> Result<Arc<FeatureVector>, String>,
) -> Result<LabeledSample, ModelError> {
    let err = |reason: String| ModelError::Parse {
        line: line_no,
        reason,
    };
    let mut parts = line.trim_end().split(';');
    let label: f64 = parts
        .next()
        .unwrap_or_default()
        .parse()
        .map_err(|e| err(format!("label: {e}")))?;
    if !label.is_finite() {
        return Err(err("label is not finite".into()));
    }
    let mut sequence = Vec::new();
    for (t, part) in parts.enumerate() {
        sequence.push(step(part).map_err(|e| err(format!("step {t}: {e}")))?);
    }
    if sequence.is_empty() {
        return Err(err("no timesteps".into()));
    }
    Ok(LabeledSample { sequence, label })
}

pub fn parse_sample(line: &str, line_no: usize) -> Result<LabeledSample, ModelError> {
    parse_line(line, line_no, &mut |part| parse_step(part).map(Arc::new))
}

/// Reads a dataset file. Identical timesteps shared between samples are
/// parsed once and shared.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>, ModelError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut seen: HashMap<String, Arc<FeatureVector>> = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_line(&line, i + 1, &mut |part| {
            if let Some(f) = seen.get(part) {
                return Ok(Arc::clone(f));
            }
            let f = Arc::new(parse_step(part)?);
            seen.insert(part.to_owned(), Arc::clone(&f));
            Ok(f)
        })?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::FEATURE_DIM;

    #[test]
    fn weights_round_trip_bit_exact() {
        let w = ModelWeights::init(ModelConfig::tiny(), 42).unwrap();
        let back = decode_weights(&encode_weights(&w)).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let w = ModelWeights::init(ModelConfig::tiny(), 42).unwrap();
        let mut bytes = encode_weights(&w);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            decode_weights(&bytes),
            Err(ModelError::ChecksumMismatch)
        ));
        assert!(matches!(decode_weights(b"nope"), Err(ModelError::BadMagic)));
    }

    #[test]
    fn mismatched_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&ModelWeights::init(ModelConfig::tiny(), 1).unwrap(), &path).unwrap();
        let err = load_weights_for(&path, &ModelConfig::desk()).unwrap_err();
        assert!(matches!(err, ModelError::VersionMismatch(_)));
        assert!(load_weights_for(&path, &ModelConfig::tiny()).is_ok());
    }

    #[test]
    fn future_version_is_refused() {
        let w = ModelWeights::init(ModelConfig::tiny(), 1).unwrap();
        let mut bytes = encode_weights(&w);
        bytes.truncate(bytes.len() - 32);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(
            decode_weights(&bytes),
            Err(ModelError::VersionMismatch(_))
        ));
    }

    #[test]
    fn dataset_line_round_trip() {
        let mut v = vec![0.0; FEATURE_DIM];
        v[0] = 0.1;
        v[1035] = -1.0 / 3.0;
        let fv = Arc::new(quantize_features(&FeatureVector::from_vec(v).unwrap()));
        let zero = Arc::new(FeatureVector::zeros());
        let s = LabeledSample {
            sequence: vec![zero, fv],
            label: 2.5,
        };
        let mut buf = Vec::new();
        write_sample(&mut buf, &s).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line.matches(';').count(), 2);
        assert_eq!(parse_sample(&line, 1).unwrap(), s);
        assert!(parse_sample("x;1,2", 3).is_err());
        assert!(parse_sample("1;1,2", 3).is_err());
    }

    #[test]
    fn dataset_file_round_trip_shares_steps() {
        let mut v = vec![0.0; FEATURE_DIM];
        v[7] = 0.1;
        let a = Arc::new(quantize_features(&FeatureVector::from_vec(v).unwrap()));
        let zero = Arc::new(FeatureVector::zeros());
        let samples = vec![
            LabeledSample {
                sequence: vec![Arc::clone(&zero), Arc::clone(&a)],
                label: 0.1,
            },
            LabeledSample {
                sequence: vec![Arc::clone(&a), Arc::clone(&a)],
                label: 4.75,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        write_dataset(&path, &samples).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, samples);
        assert!(Arc::ptr_eq(&back[0].sequence[1], &back[1].sequence[0]));
        // 0.1 is not an f32, so only the quantized value survives
        assert_eq!(back[0].sequence[1].as_slice()[7], 0.1f32 as f64);
    }
}
