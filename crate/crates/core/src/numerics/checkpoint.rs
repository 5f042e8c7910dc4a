//! Binary parameter checkpoint format.
//!
//! Layout: magic `SGT1`, then repeated records of
//! `(name_len: u32 LE, name bytes, rank: u32 LE, dims: u32 LE each,
//!   payload: f64 LE per element)` until end of file.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGT1";

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic { found: [u8; 4] },
    Truncated { offset: u64, expected: usize },
    BadName { offset: u64 },
    MissingEntry { name: String },
    ShapeConflict { name: String, file: Vec<usize>, expected: Vec<usize> },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadMagic { found } => {
                write!(f, "bad checkpoint magic {found:?}, expected SGT1")
            }
            CheckpointError::Truncated { offset, expected } => {
                write!(f, "truncated checkpoint at byte {offset} ({expected} bytes expected)")
            }
            CheckpointError::BadName { offset } => {
                write!(f, "non-utf8 parameter name at byte {offset}")
            }
            CheckpointError::MissingEntry { name } => {
                write!(f, "checkpoint has no entry named '{name}'")
            }
            CheckpointError::ShapeConflict { name, file, expected } => {
                write!(f, "checkpoint entry '{name}' has shape {file:?}, expected {expected:?}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Writes `(name, tensor)` records in the order given.
pub fn save_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_param_set(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    // name order for stable files
    let mut entries: Vec<(&str, &Tensor)> = params
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    entries.sort_by_key(|(name, _)| name.to_string());
    save_checkpoint(path, entries)
}

/// Reads every record; returns them in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, 4)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }

    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4)? {
            0 => break, // clean EOF between records
            4 => {}
            k => {
                return Err(CheckpointError::Truncated {
                    offset: offset + k as u64,
                    expected: 4,
                })
            }
        }
        offset += 4;
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_at(&mut r, &mut name_bytes, &mut offset, name_len)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::BadName { offset })?;

        let mut rank4 = [0u8; 4];
        read_exact_at(&mut r, &mut rank4, &mut offset, 4)?;
        let rank = u32::from_le_bytes(rank4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d4 = [0u8; 4];
            read_exact_at(&mut r, &mut d4, &mut offset, 4)?;
            shape.push(u32::from_le_bytes(d4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut x8 = [0u8; 8];
        for _ in 0..numel {
            read_exact_at(&mut r, &mut x8, &mut offset, 8)?;
            data.push(f64::from_le_bytes(x8));
        }
        out.push((name, Tensor::from_vec(shape, data).expect("consistent by construction")));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing set, matching by name and shape.
/// Entries the set does not know are ignored (callers can inspect the file
/// with [`load_checkpoint`] if they care).
pub fn load_into_param_set(path: &Path, params: &mut ParamSet) -> Result<(), CheckpointError> {
    let entries = load_checkpoint(path)?;
    let mut found = std::collections::BTreeSet::new();
    for (name, tensor) in entries {
        if let Some(id) = params.id_of(&name) {
            let expected = params.value(id).shape().to_vec();
            if tensor.shape() != expected.as_slice() {
                return Err(CheckpointError::ShapeConflict {
                    name,
                    file: tensor.shape().to_vec(),
                    expected,
                });
            }
            params.get_mut(id).value = tensor.with_grad();
            found.insert(name);
        }
    }
    for (_, p) in params.iter() {
        if !found.contains(&p.name) {
            return Err(CheckpointError::MissingEntry {
                name: p.name.clone(),
            });
        }
    }
    Ok(())
}

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    expected: usize,
) -> Result<(), CheckpointError> {
    match r.read_exact(buf) {
        Ok(()) => {
            *offset += expected as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(CheckpointError::Truncated {
            offset: *offset,
            expected,
        }),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.sgt");
        let mut ps = ParamSet::new();
        ps.add("epfe.a", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 0.0]).unwrap())
            .unwrap();
        ps.add("llm.bias", Tensor::vector(vec![0.125, f64::MIN_POSITIVE]))
            .unwrap();
        save_param_set(&path, &ps).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        let a = loaded.iter().find(|(n, _)| n == "epfe.a").unwrap();
        assert_eq!(a.1.shape(), &[2, 2]);
        assert_eq!(a.1.data(), ps.value(ps.id_of("epfe.a").unwrap()).data());
        let b = loaded.iter().find(|(n, _)| n == "llm.bias").unwrap();
        assert_eq!(b.1.data(), &[0.125, f64::MIN_POSITIVE]);
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.sgt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sgt");
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        save_param_set(&path, &ps).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Truncated { offset, .. }) => assert!(offset > 4),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn load_into_set_rejects_missing_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sgt");
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(1.0)).unwrap();
        save_param_set(&path, &ps).unwrap();
        let mut bigger = ParamSet::new();
        bigger.add("w", Tensor::scalar(0.0)).unwrap();
        bigger.add("extra", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            load_into_param_set(&path, &mut bigger),
            Err(CheckpointError::MissingEntry { .. })
        ));
    }
}
