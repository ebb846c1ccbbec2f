//! Model serialization.
//!
//! Layout: the magic bytes `MTLM1`, a little-endian u64 byte length, that many
//! bytes of UTF-8 manifest text, then one flat little-endian f64 array per
//! parameter in manifest order. The manifest is line-oriented:
//!
//! ```text
//! config <ModelConfig as JSON>
//! vocab <surface tokens, space separated, id order>
//! param <name> <rows> <cols>
//! ...
//! ```
//!
//! Reserved vocabulary entries are implicit (they are pinned ids), so only
//! surface tokens are listed. Round-trips are bitwise exact: every f64 is
//! copied via its raw bits, never reformatted through text.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::Matrix;
use crate::params::ParamSet;
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 5] = b"MTLM1";

/// Serialize a model to any writer.
pub fn write_model<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str("config ");
    manifest.push_str(
        &serde_json::to_string(model.config())
            .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?,
    );
    manifest.push('\n');
    manifest.push_str("vocab");
    for t in model.vocab().surface_tokens() {
        manifest.push(' ');
        manifest.push_str(t);
    }
    manifest.push('\n');
    for (name, m) in model.params().iter() {
        manifest.push_str(&format!("param {name} {} {}\n", m.rows(), m.cols()));
    }

    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    for (_, m) in model.params().iter() {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Deserialize a model from any reader. The stream must end exactly at the
/// last parameter array.
pub fn read_model<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 5];
    read_fully(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} (not an MTLM1 checkpoint)",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    read_fully(&mut r, &mut len_bytes, "manifest length")?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    read_fully(&mut r, &mut manifest_bytes, "manifest")?;
    let manifest = String::from_utf8(manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest is not UTF-8: {e}")))?;

    let mut lines = manifest.lines();
    let config_line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty manifest".into()))?;
    let config_json = config_line
        .strip_prefix("config ")
        .ok_or_else(|| Error::Checkpoint("manifest must start with a config line".into()))?;
    let config: ModelConfig = serde_json::from_str(config_json)
        .map_err(|e| Error::Checkpoint(format!("bad config line: {e}")))?;

    let vocab_line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("manifest missing vocab line".into()))?;
    let vocab_rest = vocab_line
        .strip_prefix("vocab")
        .ok_or_else(|| Error::Checkpoint("second manifest line must list the vocab".into()))?;
    let vocab = Vocabulary::from_tokens(vocab_rest.split_whitespace())?;

    let mut params = ParamSet::new();
    for line in lines {
        let mut fields = line.split_whitespace();
        let (tag, name, rows, cols) =
            match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(tag), Some(name), Some(r), Some(c)) => (tag, name, r, c),
                _ => return Err(Error::Checkpoint(format!("malformed manifest line {line:?}"))),
            };
        if tag != "param" || fields.next().is_some() {
            return Err(Error::Checkpoint(format!("malformed manifest line {line:?}")));
        }
        let rows: usize = rows
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad row count in line {line:?}")))?;
        let cols: usize = cols
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad column count in line {line:?}")))?;
        let mut data = vec![0.0f64; rows.checked_mul(cols).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {name:?} shape overflows"))
        })?];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_fully(&mut r, &mut buf, name)?;
            *v = f64::from_le_bytes(buf);
        }
        params.insert(name, Matrix::from_vec(rows, cols, data)?)?;
    }

    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last parameter".into()));
    }
    Model::from_parts(config, vocab, params)
}

/// Save a model to a checkpoint file.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Load a model from a checkpoint file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(BufReader::new(File::open(path.as_ref())?))
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderVariant;

    fn sample_model(encoder: EncoderVariant) -> Model {
        let config = ModelConfig {
            embed_dim: 6,
            hidden_dim: 5,
            layers: 2,
            intent_labels: vec!["music".into(), "alarm".into(), "weather".into()],
            slot_labels: vec!["other".into(), "artist".into()],
            encoder,
            pool_dim: 4,
            tie_embeddings: false,
            init_scale: 0.1,
        };
        let vocab = Vocabulary::from_tokens(["play", "some", "jazz", "now"]).unwrap();
        Model::new(config, vocab, 42).unwrap()
    }

    fn roundtrip(model: &Model) -> Model {
        let mut bytes = Vec::new();
        write_model(model, &mut bytes).unwrap();
        read_model(bytes.as_slice()).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_exact_for_every_variant() {
        for encoder in [
            EncoderVariant::NoAttention,
            EncoderVariant::WeightedAttention,
            EncoderVariant::ProjectedAttention,
        ] {
            let model = sample_model(encoder);
            let loaded = roundtrip(&model);
            let (a, b) = (model.params().flatten(), loaded.params().flatten());
            assert_eq!(a.len(), b.len());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            let names: Vec<_> = model.params().iter().map(|(n, _)| n.to_string()).collect();
            let loaded_names: Vec<_> = loaded.params().iter().map(|(n, _)| n.to_string()).collect();
            assert_eq!(names, loaded_names);
            assert_eq!(
                serde_json::to_string(model.config()).unwrap(),
                serde_json::to_string(loaded.config()).unwrap()
            );
            assert_eq!(model.vocab().surface_tokens(), loaded.vocab().surface_tokens());
        }
    }

    #[test]
    fn awkward_float_values_survive() {
        let mut model = sample_model(EncoderVariant::NoAttention);
        let m = model.params_mut().get_mut("backbone.embedding").unwrap();
        m.set(0, 0, -0.0);
        m.set(0, 1, 1e-310); // subnormal
        m.set(0, 2, f64::MIN_POSITIVE);
        m.set(0, 3, 0.1 + 0.2);
        m.set(1, 0, f64::MAX);
        let loaded = roundtrip(&model);
        let got = loaded.params().get("backbone.embedding").unwrap();
        assert_eq!(got.get(0, 0).to_bits(), (-0.0f64).to_bits());
        assert_eq!(got.get(0, 1).to_bits(), (1e-310f64).to_bits());
        assert_eq!(got.get(0, 3).to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(got.get(1, 0).to_bits(), f64::MAX.to_bits());
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let model = sample_model(EncoderVariant::WeightedAttention);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_model(&model, &mut a).unwrap();
        write_model(&model, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model(EncoderVariant::ProjectedAttention);
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.params().flatten(), loaded.params().flatten());
    }

    #[test]
    fn bad_magic_rejected() {
        let model = sample_model(EncoderVariant::NoAttention);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        bytes[0] = b'X';
        let err = read_model(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let model = sample_model(EncoderVariant::NoAttention);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_model(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let model = sample_model(EncoderVariant::NoAttention);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        bytes.push(0);
        let err = read_model(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn manifest_shape_mismatch_rejected() {
        let model = sample_model(EncoderVariant::NoAttention);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        // Rewrite the embedding shape from 8x6 to 6x8; the config check in
        // Model::from_parts must notice even though sizes agree.
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let manifest = String::from_utf8(bytes[13..13 + len].to_vec()).unwrap();
        let swapped = manifest.replace("param backbone.embedding 8 6", "param backbone.embedding 6 8");
        assert_ne!(manifest, swapped);
        bytes.splice(13..13 + len, swapped.into_bytes());
        let err = read_model(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn loaded_model_scores_identically() {
        let model = sample_model(EncoderVariant::NoAttention);
        let loaded = roundtrip(&model);
        let seq = model.vocab().encode_words(&["play", "jazz"]).unwrap();
        let a = model.sequence_logprob(&seq, true).unwrap();
        let b = loaded.sequence_logprob(&seq, true).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
