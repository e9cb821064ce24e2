//! The weights container: a flat named-tensor file with a trailing checksum.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"SEPW"
//! version u32
//! tensor count u32
//! per tensor (sorted by name):
//!   name length u16, UTF-8 name
//!   rank u8, dims u64 x rank
//!   payload f32 x product(dims)
//! CRC32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Model files additionally carry a reserved `~config` tensor encoding the
//! `ModelConfig`; extractor files carry `~extractor` with the stage count.

use std::collections::BTreeMap;
use std::path::Path;

use sepconv_core::model::{ModelConfig, Parameters, Variant};
use sepconv_core::tensor::Tensor;
use sepconv_core::training::{FeatureExtractor, PyramidStage};

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"SEPW";
pub const VERSION: u32 = 1;

const CONFIG_KEY: &str = "~config";
const EXTRACTOR_KEY: &str = "~extractor";

pub fn write_container(path: &Path, entries: &BTreeMap<String, Tensor<f32>>) -> CliResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(CliError::Config(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CliError::Config(format!("tensor rank too large: {name}")));
        }
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| CliError::io(path, e))
}

pub fn read_container(path: &Path) -> CliResult<BTreeMap<String, Tensor<f32>>> {
    let buf = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if buf.len() < MAGIC.len() + 12 {
        return Err(CliError::Integrity(format!(
            "{}: truncated container",
            path.display()
        )));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CliError::Integrity(format!(
            "{}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})",
            path.display()
        )));
    }

    let mut cursor = Reader { buf: body, pos: 0 };
    let magic = cursor.take(4)?;
    if magic != MAGIC {
        return Err(CliError::Integrity(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(CliError::Integrity(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = cursor.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = cursor.u16()? as usize;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|_| CliError::Integrity("tensor name is not UTF-8".into()))?;
        let rank = cursor.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u64()? as usize);
        }
        let volume: usize = shape.iter().product();
        let raw = cursor.take(volume * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| CliError::Integrity(format!("tensor {name}: {e}")))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(CliError::Integrity(format!("duplicate tensor {name}")));
        }
    }
    if cursor.pos != cursor.buf.len() {
        return Err(CliError::Integrity(format!(
            "{}: {} trailing bytes",
            path.display(),
            cursor.buf.len() - cursor.pos
        )));
    }
    Ok(entries)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> CliResult<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(CliError::Integrity("container truncated mid-record".into()));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn encode_config(config: &ModelConfig) -> Tensor<f32> {
    let mut vals = vec![
        config.levels as f32,
        config.convs_per_block as f32,
        config.kernel_size as f32,
        match config.variant {
            Variant::KernelPrediction => 0.0,
            Variant::DirectSynthesis => 1.0,
        },
        config.width_scale as f32,
    ];
    vals.extend(config.widths.iter().map(|&w| w as f32));
    Tensor::new(&[vals.len()], vals).expect("config vector")
}

fn decode_config(t: &Tensor<f32>) -> CliResult<ModelConfig> {
    let v = t.data();
    if v.len() < 6 {
        return Err(CliError::Integrity("config record too short".into()));
    }
    let levels = v[0] as usize;
    let widths: Vec<usize> = v[5..].iter().map(|&x| x as usize).collect();
    if widths.len() != levels {
        return Err(CliError::Integrity(format!(
            "config record: {} widths for {} levels",
            widths.len(),
            levels
        )));
    }
    Ok(ModelConfig {
        levels,
        widths,
        convs_per_block: v[1] as usize,
        kernel_size: v[2] as usize,
        variant: if v[3] == 0.0 {
            Variant::KernelPrediction
        } else {
            Variant::DirectSynthesis
        },
        width_scale: v[4] as usize,
    })
}

/// Writes a model: all parameter tensors plus the `~config` record.
pub fn save_model(path: &Path, params: &Parameters<f32>) -> CliResult<()> {
    let mut entries: BTreeMap<String, Tensor<f32>> = params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    entries.insert(CONFIG_KEY.to_string(), encode_config(&params.config));
    write_container(path, &entries)
}

/// Reads a model, validating the tensor set against the embedded config.
pub fn load_model(path: &Path) -> CliResult<Parameters<f32>> {
    let mut entries = read_container(path)?;
    let config = decode_config(&entries.remove(CONFIG_KEY).ok_or_else(|| {
        CliError::Integrity(format!("{}: not a model file (no config)", path.display()))
    })?)?;
    Parameters::from_tensors(config, entries).map_err(CliError::from)
}

/// Writes a feature extractor's conv stages.
pub fn save_extractor(path: &Path, extractor: &FeatureExtractor<f32>) -> CliResult<()> {
    let stages = extractor.stage_tensors();
    if stages.is_empty() {
        return Err(CliError::Config(
            "the identity extractor has no weights to save".into(),
        ));
    }
    let mut entries: BTreeMap<String, Tensor<f32>> = stages.into_iter().collect();
    let count = entries.len() as f32 / 2.0;
    entries.insert(
        EXTRACTOR_KEY.to_string(),
        Tensor::new(&[1], vec![count]).expect("count"),
    );
    write_container(path, &entries)
}

/// Loads an external feature extractor saved by [`save_extractor`].
pub fn load_extractor(path: &Path) -> CliResult<FeatureExtractor<f32>> {
    let mut entries = read_container(path)?;
    let count = entries
        .remove(EXTRACTOR_KEY)
        .ok_or_else(|| {
            CliError::Integrity(format!(
                "{}: not an extractor file (no stage record)",
                path.display()
            ))
        })?
        .data()[0] as usize;
    let mut stages = Vec::with_capacity(count);
    for i in 0..count {
        let weight = entries
            .remove(&format!("stage{i}.weight"))
            .ok_or_else(|| CliError::Integrity(format!("missing stage{i}.weight")))?;
        let bias = entries
            .remove(&format!("stage{i}.bias"))
            .ok_or_else(|| CliError::Integrity(format!("missing stage{i}.bias")))?;
        stages.push(PyramidStage { weight, bias });
    }
    FeatureExtractor::from_stages(format!("external({})", path.display()), stages)
        .map_err(CliError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sepconv_core::model::build;
    use sepconv_core::rng::RandomStream;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sepconv-weights-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn tiny_params() -> Parameters<f32> {
        let config = ModelConfig {
            levels: 2,
            widths: vec![2, 3],
            convs_per_block: 1,
            kernel_size: 5,
            variant: Variant::KernelPrediction,
            width_scale: 1,
        };
        build(&config, &mut RandomStream::new(7)).unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let params = tiny_params();
        let path = tmp("roundtrip.sepw");
        save_model(&path, &params).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        for ((na, ta), (nb, tb)) in params.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let params = tiny_params();
        let path = tmp("corrupt.sepw");
        save_model(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(CliError::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let params = tiny_params();
        let path = tmp("trunc.sepw");
        save_model(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_model(&path), Err(CliError::Integrity(_))));
    }

    #[test]
    fn extractor_roundtrip() {
        let phi = FeatureExtractor::<f32>::seeded_random_pyramid(3, &[4, 8]).unwrap();
        let path = tmp("extractor.sepw");
        save_extractor(&path, &phi).unwrap();
        let loaded = load_extractor(&path).unwrap();
        let (a, b) = (phi.stage_tensors(), loaded.stage_tensors());
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }
}
