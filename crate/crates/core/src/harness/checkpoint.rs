//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4  bytes  "DNFT"
//! format version   u32
//! schedule id      u32 length + utf-8 bytes
//! dim              u32
//! cond_vocab       u32
//! n_hidden         u32, then n_hidden u32 widths
//! activation       u8 (0 = tanh)
//! config digest    32 bytes
//! n_params         u64
//! params           n_params f64
//! ```
//!
//! Save/load round-trips are bit-identical. Loading verifies the magic and
//! version; a config-digest mismatch is refused unless forced.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, VelocityModel};

pub const MAGIC: &[u8; 4] = b"DNFT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub schedule_id: String,
    pub arch: Architecture,
    pub config_digest: [u8; 32],
}

pub fn save_checkpoint(
    path: &Path,
    model: &VelocityModel,
    schedule_id: &str,
    config_digest: [u8; 32],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf: Vec<u8> = Vec::with_capacity(64 + model.num_params() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let id = schedule_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    let arch = model.arch();
    buf.extend_from_slice(&(arch.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.cond_vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for &w in &arch.hidden {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.push(match arch.activation {
        Activation::Tanh => 0u8,
    });
    buf.extend_from_slice(&config_digest);
    buf.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for &p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VelocityModel, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };

    if take(&mut cursor, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let id_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let schedule_id = String::from_utf8(take(&mut cursor, id_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("schedule id is not utf-8".into()))?;
    let dim = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let cond_vocab = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let n_hidden = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
    }
    let activation = match take(&mut cursor, 1)?[0] {
        0 => Activation::Tanh,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown activation tag {other}"
            )))
        }
    };
    let mut config_digest = [0u8; 32];
    config_digest.copy_from_slice(take(&mut cursor, 32)?);
    let n_params = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }

    let arch = Architecture::new(dim, cond_vocab, hidden)?;
    if arch.activation != activation {
        return Err(Error::Checkpoint("activation tag mismatch".into()));
    }
    let model = VelocityModel::from_params(arch.clone(), params)
        .map_err(|_| Error::Checkpoint("parameter count does not match architecture".into()))?;
    Ok((
        model,
        CheckpointHeader {
            schedule_id,
            arch,
            config_digest,
        },
    ))
}

/// Load and verify against the current experiment's schedule and digest.
pub fn load_checked(
    path: &Path,
    schedule_id: &str,
    config_digest: [u8; 32],
    force: bool,
) -> Result<(VelocityModel, CheckpointHeader)> {
    let (model, header) = load_checkpoint(path)?;
    if header.schedule_id != schedule_id {
        return Err(Error::Checkpoint(format!(
            "checkpoint schedule {:?} does not match config {:?}",
            header.schedule_id, schedule_id
        )));
    }
    if header.config_digest != config_digest && !force {
        return Err(Error::Checkpoint(
            "config digest mismatch; pass --force to load anyway".into(),
        ));
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn model() -> VelocityModel {
        use rand::Rng;
        let mut m = VelocityModel::init(Architecture::new(2, 2, vec![6, 5]).unwrap(), 7);
        let mut rng = crate::rng::substream(7, &[1]);
        for p in m.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dnft");
        let m = model();
        save_checkpoint(&path, &m, "rectified_flow", [7u8; 32]).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.schedule_id, "rectified_flow");
        assert_eq!(header.config_digest, [7u8; 32]);
        assert_eq!(header.arch, *m.arch());
        assert_eq!(loaded.params().len(), m.params().len());
        for (a, b) in loaded.params().iter().zip(m.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Same bytes on re-save.
        let path2 = dir.path().join("m2.dnft");
        save_checkpoint(&path2, &loaded, "rectified_flow", [7u8; 32]).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn digest_mismatch_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dnft");
        save_checkpoint(&path, &model(), "rectified_flow", [1u8; 32]).unwrap();
        assert!(load_checked(&path, "rectified_flow", [2u8; 32], false).is_err());
        assert!(load_checked(&path, "rectified_flow", [2u8; 32], true).is_ok());
        assert!(load_checked(&path, "other", [1u8; 32], true).is_err());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dnft");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());

        let path = dir.path().join("t.dnft");
        save_checkpoint(&path, &model(), "rectified_flow", [0u8; 32]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
