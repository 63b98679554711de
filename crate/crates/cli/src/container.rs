//! Binary artifact containers: frozen codebook files and model
//! checkpoints. Fixed little-endian layout, distinct magics, explicit
//! format versions so the manifest can pin them.

use std::fmt;
use std::fs;
use std::path::Path;

use spatok_core::codebook::{Codebook, VqVaeParams};
use spatok_core::model::{init_model, ModelConfig, ModelParams};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"SPTKVQ1\n";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPTKCK1\n";
pub const CODEBOOK_FORMAT: u32 = 1;
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug)]
pub enum ContainerError {
    Io { path: String, source: std::io::Error },
    Malformed { path: String, reason: String },
}

impl fmt::Display for ContainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerError::Io { path, source } => write!(f, "{path}: {source}"),
            ContainerError::Malformed { path, reason } => write!(f, "{path}: {reason}"),
        }
    }
}

impl std::error::Error for ContainerError {}

fn bad(path: &Path, reason: impl Into<String>) -> ContainerError {
    ContainerError::Malformed { path: path.display().to_string(), reason: reason.into() }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Writer {
        Writer { buf: magic.to_vec() }
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&u32::try_from(v).expect("fits u32").to_le_bytes());
    }

    fn f64_array(&mut self, values: &[f64]) {
        self.u32(values.len());
        for &v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8], magic: &[u8; 8]) -> Result<Reader<'a>, ContainerError> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(bad(path, "wrong or missing magic"));
        }
        Ok(Reader { path, bytes, pos: 8 })
    }

    fn u32(&mut self) -> Result<usize, ContainerError> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| bad(self.path, "truncated integer"))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as usize)
    }

    fn f64_array(&mut self, expected: usize) -> Result<Vec<f64>, ContainerError> {
        let len = self.u32()?;
        if len != expected {
            return Err(bad(self.path, format!("array length {len}, expected {expected}")));
        }
        let end = self.pos + 8 * len;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| bad(self.path, "truncated array"))?;
        self.pos = end;
        Ok(chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<(), ContainerError> {
        if self.pos != self.bytes.len() {
            return Err(bad(self.path, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn save_codebook(path: &Path, params: &VqVaeParams) -> Result<(), ContainerError> {
    let mut w = Writer::new(CODEBOOK_MAGIC);
    w.u32(CODEBOOK_FORMAT as usize);
    for dim in [
        params.codebook.k,
        params.codebook.e,
        params.patch_size,
        params.image_height,
        params.image_width,
        params.hidden,
    ] {
        w.u32(dim);
    }
    for array in [
        &params.enc_w1,
        &params.enc_b1,
        &params.enc_w2,
        &params.enc_b2,
        &params.dec_w1,
        &params.dec_b1,
        &params.dec_w2,
        &params.dec_b2,
        &params.codebook.entries,
    ] {
        w.f64_array(array);
    }
    fs::write(path, w.buf)
        .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })
}

pub fn load_codebook(path: &Path) -> Result<VqVaeParams, ContainerError> {
    let bytes = fs::read(path)
        .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    let mut r = Reader::new(path, &bytes, CODEBOOK_MAGIC)?;
    let format = r.u32()?;
    if format != CODEBOOK_FORMAT as usize {
        return Err(bad(path, format!("codebook format {format}, expected {CODEBOOK_FORMAT}")));
    }
    let k = r.u32()?;
    let e = r.u32()?;
    let patch_size = r.u32()?;
    let image_height = r.u32()?;
    let image_width = r.u32()?;
    let hidden = r.u32()?;
    if patch_size == 0 || image_height % patch_size != 0 || image_width % patch_size != 0 {
        return Err(bad(path, "image geometry not divisible by patch size"));
    }
    let pp = patch_size * patch_size;
    let params = VqVaeParams {
        enc_w1: r.f64_array(pp * hidden)?,
        enc_b1: r.f64_array(hidden)?,
        enc_w2: r.f64_array(hidden * e)?,
        enc_b2: r.f64_array(e)?,
        dec_w1: r.f64_array(e * hidden)?,
        dec_b1: r.f64_array(hidden)?,
        dec_w2: r.f64_array(hidden * pp)?,
        dec_b2: r.f64_array(pp)?,
        hidden,
        codebook: Codebook { k, e, entries: r.f64_array(k * e)? },
        image_height,
        image_width,
        patch_size,
    };
    r.finish()?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ContainerError> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_FORMAT as usize);
    let c = &params.config;
    for dim in [
        c.d_model,
        c.layers,
        c.heads,
        c.feedforward,
        c.image_patch,
        c.max_len,
        c.d_feat,
        params.vocab_size,
        params.image_height,
        params.image_width,
    ] {
        w.u32(dim);
    }
    let groups = params.groups();
    w.u32(groups.len());
    for g in groups {
        w.f64_array(g);
    }
    fs::write(path, w.buf)
        .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ContainerError> {
    let bytes = fs::read(path)
        .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    let mut r = Reader::new(path, &bytes, CHECKPOINT_MAGIC)?;
    let format = r.u32()?;
    if format != CHECKPOINT_FORMAT as usize {
        return Err(bad(path, format!("checkpoint format {format}, expected {CHECKPOINT_FORMAT}")));
    }
    let config = ModelConfig {
        d_model: r.u32()?,
        layers: r.u32()?,
        heads: r.u32()?,
        feedforward: r.u32()?,
        image_patch: r.u32()?,
        max_len: r.u32()?,
        d_feat: r.u32()?,
        dropout: 0.0,
    };
    let vocab_size = r.u32()?;
    let image_height = r.u32()?;
    let image_width = r.u32()?;
    let mut params = init_model(&config, vocab_size, image_height, image_width, 0)
        .map_err(|e| bad(path, format!("invalid geometry: {e}")))?;
    let count = r.u32()?;
    let lens = params.group_lens();
    if count != lens.len() {
        return Err(bad(path, format!("{count} parameter groups, expected {}", lens.len())));
    }
    {
        let mut groups = params.groups_mut();
        for (group, len) in groups.iter_mut().zip(lens) {
            group.copy_from_slice(&r.f64_array(len)?);
        }
    }
    r.finish()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spatok_core::codebook::{train_vqvae, VqVaeConfig};
    use spatok_core::scene::{generate_scene, SceneConfig};

    #[test]
    fn codebook_round_trips_bit_exactly() {
        let cfg = SceneConfig::default();
        let maps: Vec<_> =
            (0..260u64).map(|i| generate_scene(&cfg, i).unwrap().depth).collect();
        let vq_cfg = VqVaeConfig { steps: 30, ..VqVaeConfig::default() };
        let params = train_vqvae(&maps, &vq_cfg).unwrap().params;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.bin");
        save_codebook(&path, &params).unwrap();
        let loaded = load_codebook(&path).unwrap();
        assert_eq!(loaded, params);
        // Same parameters serialize to the same bytes.
        let again = dir.path().join("codebook2.bin");
        save_codebook(&again, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let config = ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            feedforward: 24,
            image_patch: 4,
            max_len: 64,
            d_feat: 6,
            dropout: 0.0,
        };
        let params = init_model(&config, 48, 20, 20, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&path, &params).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), params);
    }

    #[test]
    fn magic_and_truncation_are_rejected_with_the_file_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a container").unwrap();
        let err = load_codebook(&path).unwrap_err().to_string();
        assert!(err.contains("junk.bin") && err.contains("magic"), "{err}");

        // A checkpoint magic on a codebook loader is a hard error.
        std::fs::write(&path, CHECKPOINT_MAGIC).unwrap();
        assert!(load_codebook(&path).is_err());

        let mut valid = CODEBOOK_MAGIC.to_vec();
        valid.extend_from_slice(&1u32.to_le_bytes());
        valid.extend_from_slice(&40u32.to_le_bytes());
        std::fs::write(&path, valid).unwrap();
        let err = load_codebook(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
