//! Model checkpoint file format.
//!
//! Layout: magic `MBRT`, format version (u16 LE), a canonical key=value
//! config block, an index of `(name, shape, byte offset)` entries, then
//! parameter data as little-endian IEEE-754 single precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{count_parameters, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Real};

const MAGIC: &[u8; 4] = b"MBRT";
const VERSION: u16 = 1;

fn config_block<T: Real>(model: &Model<T>) -> String {
    let c = &model.config;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("num_layers", c.num_layers.to_string());
    kv("hidden_size", c.hidden_size.to_string());
    kv("num_heads", c.num_heads.to_string());
    kv("feedforward_size", c.feedforward_size.to_string());
    kv("vocab_size", c.vocab_size.to_string());
    kv("max_len", c.max_len.to_string());
    kv("embedding_size", c.embedding_size.to_string());
    kv("share_layer_parameters", c.share_layer_parameters.to_string());
    kv("dropout_p", format!("{:?}", c.dropout_p));
    kv("activation", c.activation.to_string());
    kv("pre_norm", c.pre_norm.to_string());
    kv("nsp_enabled", c.nsp_enabled.to_string());
    kv("dynamic_masking", c.dynamic_masking.to_string());
    kv(
        "classifier_classes",
        model.num_classes().map_or("none".into(), |n| n.to_string()),
    );
    kv("mlm_head", model.mlm_head.is_some().to_string());
    kv("nsp_head", model.nsp_head.is_some().to_string());
    s
}

struct ParsedHeader {
    config: EncoderConfig,
    classifier_classes: Option<usize>,
    mlm_head: bool,
    nsp_head: bool,
}

fn parse_config_block(block: &str) -> Result<ParsedHeader> {
    let mut map = std::collections::HashMap::new();
    for line in block.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("config block missing '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad integer for '{k}'")))
    };
    let parse_bool = |k: &str| -> Result<bool> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad boolean for '{k}'")))
    };
    let config = EncoderConfig {
        num_layers: parse_usize("num_layers")?,
        hidden_size: parse_usize("hidden_size")?,
        num_heads: parse_usize("num_heads")?,
        feedforward_size: parse_usize("feedforward_size")?,
        vocab_size: parse_usize("vocab_size")?,
        max_len: parse_usize("max_len")?,
        embedding_size: parse_usize("embedding_size")?,
        share_layer_parameters: parse_bool("share_layer_parameters")?,
        dropout_p: get("dropout_p")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad dropout_p".into()))?,
        activation: get("activation")?.parse::<Activation>()?,
        pre_norm: parse_bool("pre_norm")?,
        nsp_enabled: parse_bool("nsp_enabled")?,
        dynamic_masking: parse_bool("dynamic_masking")?,
    };
    let classifier_classes = match get("classifier_classes")?.as_str() {
        "none" => None,
        n => Some(
            n.parse()
                .map_err(|_| Error::Checkpoint("bad classifier_classes".into()))?,
        ),
    };
    Ok(ParsedHeader {
        config,
        classifier_classes,
        mlm_head: parse_bool("mlm_head")?,
        nsp_head: parse_bool("nsp_head")?,
    })
}

/// Writes `model` to `path` in MBRT format (weights stored as f32).
pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let block = config_block(model);
    w.write_all(&(block.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(block.as_bytes()).map_err(io)?;

    let params = model.param_refs();
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    let mut offset: u64 = 0;
    for (name, tensor) in &params {
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[tensor.shape().len() as u8]).map_err(io)?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&offset.to_le_bytes()).map_err(io)?;
        offset += 4 * tensor.len() as u64;
    }
    for (_, tensor) in &params {
        for v in tensor.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Loads a checkpoint, validating the stored config's parameter count
/// against the index.
pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic bytes (not an MBRT checkpoint)",
            path.display()
        )));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf).map_err(io)?;
    let version = u16::from_le_bytes(u16buf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let block_len = u32::from_le_bytes(u32buf) as usize;
    let mut block = vec![0u8; block_len];
    r.read_exact(&mut block).map_err(io)?;
    let header = parse_config_block(
        std::str::from_utf8(&block)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?,
    )?;

    r.read_exact(&mut u32buf).map_err(io)?;
    let entry_count = u32::from_le_bytes(u32buf) as usize;
    let mut index: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        r.read_exact(&mut u16buf).map_err(io)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(io)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut u32buf).map_err(io)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(io)?;
        index.push((name, shape, u64::from_le_bytes(u64buf)));
    }

    // the stored config must account for exactly the encoder tensors present
    let encoder_scalars: u64 = index
        .iter()
        .filter(|(name, _, _)| !name.starts_with("heads."))
        .map(|(_, shape, _)| shape.iter().product::<usize>() as u64)
        .sum();
    let expected = count_parameters(&header.config);
    if encoder_scalars != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {encoder_scalars} encoder scalars but its config implies {expected}"
        )));
    }

    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(io)?;

    let mut model = Model::<T>::init(&header.config, 0)?;
    if let Some(classes) = header.classifier_classes {
        model.attach_classifier(classes, 0)?;
    }
    if header.mlm_head {
        model.attach_mlm_head(0);
    }
    if header.nsp_head {
        model.attach_nsp_head(0);
    }

    let mut remaining: std::collections::HashMap<&str, (&Vec<usize>, u64)> = index
        .iter()
        .map(|(n, s, o)| (n.as_str(), (s, *o)))
        .collect();
    for (name, tensor) in model.param_refs_mut() {
        let (shape, offset) = remaining.remove(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing tensor '{name}'"))
        })?;
        if shape.as_slice() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?} in file, {:?} in model",
                shape,
                tensor.shape()
            )));
        }
        let start = offset as usize;
        let end = start + 4 * tensor.len();
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' extends past the end of the data section"
            )));
        }
        for (i, chunk) in data[start..end].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            tensor.data_mut()[i] = T::from_f64(v as f64);
        }
    }
    if let Some(extra) = remaining.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds unexpected tensor '{extra}'"
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{preset, Preset, Scale};

    fn tiny_model() -> Model<f32> {
        let mut cfg = preset(Preset::AlbertBase, Scale::Tiny);
        cfg.vocab_size = 50;
        cfg.max_len = 12;
        let mut m = Model::init(&cfg, 99).unwrap();
        m.attach_classifier(5, 7).unwrap();
        m
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrt");
        let model = tiny_model();
        save(&model, &path).unwrap();
        let loaded: Model<f32> = load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.num_classes(), Some(5));
        for ((n1, t1), (_, t2)) in model.param_refs().iter().zip(loaded.param_refs().iter()) {
            assert_eq!(t1.shape(), t2.shape(), "{n1}");
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mbrt");
        let p2 = dir.path().join("b.mbrt");
        let model = tiny_model();
        save(&model, &p1).unwrap();
        let loaded: Model<f32> = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.mbrt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_count_mismatch() {
        // corrupt the stored num_layers so count_parameters disagrees with
        // the index
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbrt");
        let mut model = tiny_model();
        model.config.share_layer_parameters = false;
        model.config.num_layers = 3; // layers vec still has 1 entry
        save(&model, &path).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
