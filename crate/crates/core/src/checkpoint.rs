//! Versioned binary container for model snapshots.
//!
//! Layout, stable within a format version:
//!
//! ```text
//! bytes 0..8    magic "KGINJCKP"
//! bytes 8..12   little-endian u32: JSON header length in bytes
//! header        UTF-8 JSON
//! payload       tensor elements, little-endian, concatenated in header order
//! ```
//!
//! The header records the format version, element dtype, encoder and adapter
//! configuration, the RNG algorithm identifier, and one entry per tensor:
//! name, shape, parameter group, frozen flag, and its element offset and
//! count within the payload. Offsets are redundant with the ordering and act
//! as a consistency check.
//!
//! Loading rebuilds the model through its normal constructors and then
//! overwrites every tensor element-for-element, so a save/load round trip is
//! bit-identical and a loaded file can never contain tensors the model
//! doesn't expect. Writing is deterministic: the same model always produces
//! the same bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterConfig, EncoderConfig, EncoderModel, ParamGroup};
use crate::scalar::Scalar;
use crate::seeding::RNG_ALGORITHM;

pub const MAGIC: &[u8; 8] = b"KGINJCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Header entry describing one tensor in the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub frozen: bool,
    /// Element offset of this tensor's first value in the payload.
    pub offset: u64,
    /// Element count; the product of `shape`.
    pub elements: u64,
}

/// Everything about a checkpoint except the tensor values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Element dtype of the payload (`"f32"` or `"f64"`).
    pub dtype: String,
    pub config: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
    /// Identifier of the RNG scheme the saving run used, for provenance.
    pub rng_algorithm: String,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointHeader {
    pub fn total_elements(&self) -> u64 {
        self.tensors.iter().map(|t| t.elements).sum()
    }
}

fn build_header<F: Scalar>(model: &EncoderModel<F>) -> CheckpointHeader {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for (name, param) in model.store.iter() {
        let elements = param.value.len() as u64;
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: param.value.shape().to_vec(),
            group: param.group,
            frozen: param.frozen,
            offset,
            elements,
        });
        offset += elements;
    }
    CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE.to_string(),
        config: model.config,
        adapter: model.adapter,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        tensors,
    }
}

/// Serializes the model to `sink`. Same model, same bytes.
pub fn write_checkpoint<F: Scalar>(model: &EncoderModel<F>, mut sink: impl Write) -> Result<()> {
    let io_err = |e: std::io::Error| Error::data(format!("checkpoint write failed: {e}"));
    let header = build_header(model);
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::data(format!("header encoding: {e}")))?;
    sink.write_all(MAGIC).map_err(io_err)?;
    sink.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    sink.write_all(&header_json).map_err(io_err)?;

    let mut buf = Vec::new();
    for (_, param) in model.store.iter() {
        buf.clear();
        buf.reserve(param.value.len() * F::BYTES);
        for &v in param.value.iter() {
            v.put_le(&mut buf);
        }
        sink.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

/// Reads the magic, length prefix, and JSON header, leaving `reader` at the
/// start of the payload.
pub fn read_header(reader: &mut impl Read) -> Result<CheckpointHeader> {
    let io_err = |e: std::io::Error| Error::data(format!("checkpoint read failed: {e}"));
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::data(
            "not a checkpoint file (magic bytes do not match)",
        ));
    }
    let mut len_bytes = [0u8; 4];
    reader.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    reader.read_exact(&mut header_json).map_err(io_err)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::data(format!("checkpoint header is not valid JSON: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint format version {} (this build reads version {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

/// Reconstructs a model from checkpoint bytes. The requested element type
/// must match the stored dtype; the tensor inventory must match what the
/// header's configuration implies, and the payload length must be exact.
pub fn read_checkpoint<F: Scalar>(mut reader: impl Read) -> Result<EncoderModel<F>> {
    let header = read_header(&mut reader)?;
    if header.dtype != F::DTYPE {
        return Err(Error::data(format!(
            "checkpoint holds {} tensors but {} was requested",
            header.dtype,
            F::DTYPE
        )));
    }

    let mut model = EncoderModel::<F>::init_base(header.config, 0)?;
    if let Some(adapter) = header.adapter {
        model.inject_adapters(adapter, 0)?;
    }
    if header.tensors.len() != model.store.len() {
        return Err(Error::data(format!(
            "checkpoint lists {} tensors, the configuration implies {}",
            header.tensors.len(),
            model.store.len()
        )));
    }

    let mut expected_offset = 0u64;
    for record in &header.tensors {
        if !model.store.contains(&record.name) {
            return Err(Error::data(format!(
                "checkpoint tensor {:?} is not part of this model",
                record.name
            )));
        }
        let current = model.store.value(&record.name);
        if current.shape() != record.shape.as_slice() {
            return Err(Error::data(format!(
                "tensor {:?} has shape {:?} in the checkpoint but {:?} in the model",
                record.name,
                record.shape,
                current.shape()
            )));
        }
        let elements: u64 = record.shape.iter().map(|&d| d as u64).product();
        if record.elements != elements || record.offset != expected_offset {
            return Err(Error::data(format!(
                "inconsistent payload layout at tensor {:?}",
                record.name
            )));
        }
        expected_offset += elements;
    }

    let payload_len = expected_offset as usize * F::BYTES;
    let mut payload = Vec::with_capacity(payload_len);
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::data(format!("checkpoint read failed: {e}")))?;
    if payload.len() != payload_len {
        return Err(Error::data(format!(
            "checkpoint payload is {} bytes, expected {payload_len}",
            payload.len()
        )));
    }

    for record in &header.tensors {
        let start = record.offset as usize * F::BYTES;
        let end = start + record.elements as usize * F::BYTES;
        let values: Vec<F> = payload[start..end]
            .chunks_exact(F::BYTES)
            .map(F::get_le)
            .collect();
        let target = model.store.raw_value_mut(&record.name);
        *target = ndarray::ArrayD::from_shape_vec(record.shape.clone(), values)
            .expect("shape validated against element count");
        model.store.set_frozen(&record.name, record.frozen);
    }
    Ok(model)
}

pub fn save_checkpoint<F: Scalar>(model: &EncoderModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    let mut writer = BufWriter::new(file);
    write_checkpoint(model, &mut writer)?;
    writer
        .flush()
        .map_err(|e| Error::data(format!("cannot flush {}: {e}", path.display())))
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<EncoderModel<F>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}

/// Reads only the header of a checkpoint file.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_header(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn toy_model<F: Scalar>(with_adapters: bool) -> EncoderModel<F> {
        let cfg = EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 17,
            max_seq_len: 12,
            dropout: 0.0,
        };
        let mut model = EncoderModel::init_base(cfg, 11).unwrap();
        if with_adapters {
            model
                .inject_adapters(
                    AdapterConfig {
                        bottleneck: 4,
                        init_std: 0.01,
                    },
                    13,
                )
                .unwrap();
        }
        model
    }

    fn to_bytes<F: Scalar>(model: &EncoderModel<F>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(model, &mut buf).unwrap();
        buf
    }

    fn assert_models_identical<F: Scalar>(a: &EncoderModel<F>, b: &EncoderModel<F>) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.adapter, b.adapter);
        assert_eq!(a.store.len(), b.store.len());
        for ((name_a, pa), (name_b, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(pa.group, pb.group, "{name_a}");
            assert_eq!(pa.frozen, pb.frozen, "{name_a}");
            assert_eq!(pa.value, pb.value, "{name_a}");
        }
        assert_eq!(a.store.checksums(), b.store.checksums());
    }

    #[test]
    fn round_trip_is_bit_identical_with_adapters() {
        let model = toy_model::<f32>(true);
        let bytes = to_bytes(&model);
        let loaded: EncoderModel<f32> = read_checkpoint(bytes.as_slice()).unwrap();
        assert_models_identical(&model, &loaded);
        // Freezing survives: only adapter tensors remain trainable.
        assert_eq!(
            model.store.trainable_names(),
            loaded.store.trainable_names()
        );
        assert!(loaded
            .store
            .trainable_names()
            .iter()
            .all(|n| n.contains(".adapter.")));
    }

    #[test]
    fn round_trip_without_adapters_and_in_double_precision() {
        let m32 = toy_model::<f32>(false);
        let l32: EncoderModel<f32> = read_checkpoint(to_bytes(&m32).as_slice()).unwrap();
        assert_models_identical(&m32, &l32);

        let m64 = toy_model::<f64>(false);
        let l64: EncoderModel<f64> = read_checkpoint(to_bytes(&m64).as_slice()).unwrap();
        assert_models_identical(&m64, &l64);
    }

    #[test]
    fn writing_is_deterministic() {
        let model = toy_model::<f32>(true);
        assert_eq!(to_bytes(&model), to_bytes(&model));
    }

    #[test]
    fn header_reports_the_inventory() {
        let model = toy_model::<f32>(true);
        let bytes = to_bytes(&model);
        let header = read_header(&mut bytes.as_slice()).unwrap();
        assert_eq!(header.format_version, FORMAT_VERSION);
        assert_eq!(header.dtype, "f32");
        assert_eq!(header.rng_algorithm, RNG_ALGORITHM);
        assert_eq!(header.tensors.len(), model.store.len());
        assert_eq!(header.total_elements(), model.store.param_count() as u64);
        assert_eq!(header.adapter.unwrap().bottleneck, 4);

        // Offsets tile the payload contiguously.
        let mut expected = 0u64;
        for t in &header.tensors {
            assert_eq!(t.offset, expected);
            expected += t.elements;
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = to_bytes(&toy_model::<f32>(false));
        bytes[0] ^= 0xFF;
        let err = read_checkpoint::<f32>(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn future_format_version_is_rejected() {
        let model = toy_model::<f32>(false);
        let bytes = to_bytes(&model);
        // Rewrite the header with a bumped version, keeping the payload.
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut value: serde_json::Value =
            serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        value["format_version"] = serde_json::json!(99);
        let new_header = serde_json::to_vec(&value).unwrap();
        let mut tampered = Vec::new();
        tampered.extend_from_slice(MAGIC);
        tampered.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        tampered.extend_from_slice(&new_header);
        tampered.extend_from_slice(&bytes[12 + header_len..]);
        let err = read_checkpoint::<f32>(tampered.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let bytes = to_bytes(&toy_model::<f32>(false));
        let err = read_checkpoint::<f64>(bytes.as_slice()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f32") && msg.contains("f64"), "{msg}");
    }

    #[test]
    fn truncated_and_padded_payloads_are_rejected() {
        let bytes = to_bytes(&toy_model::<f32>(false));
        let err = read_checkpoint::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");

        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0, 0, 0, 0]);
        let err = read_checkpoint::<f32>(padded.as_slice()).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn unknown_tensor_name_is_rejected() {
        let bytes = to_bytes(&toy_model::<f32>(false));
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut value: serde_json::Value =
            serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        value["tensors"][0]["name"] = serde_json::json!("embed.bogus");
        let new_header = serde_json::to_vec(&value).unwrap();
        let mut tampered = Vec::new();
        tampered.extend_from_slice(MAGIC);
        tampered.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        tampered.extend_from_slice(&new_header);
        tampered.extend_from_slice(&bytes[12 + header_len..]);
        let err = read_checkpoint::<f32>(tampered.as_slice()).unwrap_err();
        assert!(err.to_string().contains("embed.bogus"), "{err}");
    }

    #[test]
    fn file_round_trip_through_disk() {
        let model = toy_model::<f32>(true);
        let path = std::env::temp_dir().join(format!(
            "kginject-ckpt-{}-{}.bin",
            std::process::id(),
            seeding::derive_seed(0, "test/tmpname", &[], &[])[0]
        ));
        save_checkpoint(&model, &path).unwrap();
        let loaded: EncoderModel<f32> = load_checkpoint(&path).unwrap();
        let header = inspect_checkpoint(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_models_identical(&model, &loaded);
        assert_eq!(header.tensors.len(), model.store.len());
    }

    #[test]
    fn missing_file_yields_a_named_error() {
        let err = load_checkpoint::<f32>("/nonexistent/dir/model.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/model.ckpt"));
    }
}
