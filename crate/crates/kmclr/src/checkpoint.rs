//! Versioned binary checkpoints: every learnable tensor (name, shape,
//! row-major float64 payload) plus the id-mapping vocabularies, serialized
//! byte-for-byte deterministically.

use std::path::{Path, PathBuf};

use crate::params::{ModuleTag, ParameterSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KMCLRCKP";
const VERSION: u32 = 1;

#[derive(thiserror::Error, Debug)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// The id-mapping tables persisted next to the tensors, so a checkpoint can
/// score the exact dataset it was trained on.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VocabTables {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub behaviors: Vec<String>,
    pub target_behavior: usize,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub vocabs: VocabTables,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn put_table(buf: &mut Vec<u8>, table: &[String]) {
    put_u64(buf, table.len() as u64);
    for s in table {
        put_str(buf, s);
    }
}

/// Serializes parameters and vocabularies. The byte stream is a pure
/// function of the inputs (tensors in registration order), so identical
/// training runs produce identical files.
pub fn to_bytes(params: &ParameterSet, vocabs: &VocabTables) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut buf, params.len() as u64);
    for (_, p) in params.iter() {
        put_str(&mut buf, &p.name);
        buf.push(match p.module {
            ModuleTag::MultiBehavior => 0,
            ModuleTag::Knowledge => 1,
        });
        put_u64(&mut buf, p.value.rows() as u64);
        put_u64(&mut buf, p.value.cols() as u64);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_table(&mut buf, &vocabs.users);
    put_table(&mut buf, &vocabs.items);
    put_table(&mut buf, &vocabs.entities);
    put_table(&mut buf, &vocabs.relations);
    put_table(&mut buf, &vocabs.behaviors);
    put_u64(&mut buf, vocabs.target_behavior as u64);
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Format(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn byte(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.len_checked()?;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Format("non-UTF-8 string".into()))
    }

    fn len_checked(&mut self) -> Result<usize, CheckpointError> {
        let len = self.u64()?;
        if len > self.data.len() as u64 {
            return Err(CheckpointError::Format(format!(
                "declared length {len} exceeds file size"
            )));
        }
        Ok(len as usize)
    }

    fn table(&mut self) -> Result<Vec<String>, CheckpointError> {
        let n = self.len_checked()?;
        (0..n).map(|_| self.string()).collect()
    }
}

pub fn from_bytes(data: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic; not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let num_tensors = cur.len_checked()?;
    let mut params = ParameterSet::new();
    for _ in 0..num_tensors {
        let name = cur.string()?;
        let module = match cur.byte()? {
            0 => ModuleTag::MultiBehavior,
            1 => ModuleTag::Knowledge,
            other => {
                return Err(CheckpointError::Format(format!(
                    "unknown module tag {other} for tensor '{name}'"
                )))
            }
        };
        let rows = cur.len_checked()?;
        let cols = cur.len_checked()?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Format("tensor shape overflows".into()))?;
        let raw = cur.take(count * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.register(&name, module, Tensor::from_vec(rows, cols, values));
    }
    let vocabs = VocabTables {
        users: cur.table()?,
        items: cur.table()?,
        entities: cur.table()?,
        relations: cur.table()?,
        behaviors: cur.table()?,
        target_behavior: cur.u64()? as usize,
    };
    if cur.pos != data.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes",
            data.len() - cur.pos
        )));
    }
    Ok(Checkpoint { params, vocabs })
}

pub fn save(
    path: &Path,
    params: &ParameterSet,
    vocabs: &VocabTables,
) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(params, vocabs)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let data = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use crate::seed;

    fn sample() -> (ParameterSet, VocabTables) {
        let mut rng = seed::rng(9, "ckpt");
        let mut p = ParameterSet::new();
        p.register("mul.user", ModuleTag::MultiBehavior, normal(3, 4, 1.0, &mut rng));
        p.register("kg.user", ModuleTag::Knowledge, normal(3, 4, 1.0, &mut rng));
        p.register("mul.prelu", ModuleTag::MultiBehavior, Tensor::scalar(0.25));
        let vocabs = VocabTables {
            users: vec!["alice".into(), "bob".into(), "carol".into()],
            items: vec!["i1".into(), "i2".into()],
            entities: vec!["i1".into(), "i2".into(), "brand:acme".into()],
            relations: vec!["made_by".into()],
            behaviors: vec!["view".into(), "buy".into()],
            target_behavior: 1,
        };
        (p, vocabs)
    }

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let (p, v) = sample();
        let bytes = to_bytes(&p, &v);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.vocabs, v);
        assert_eq!(loaded.params.len(), p.len());
        for (id, orig) in p.iter() {
            let got = loaded.params.id(&orig.name).unwrap();
            assert_eq!(loaded.params.value(got).data(), orig.value.data());
            assert_eq!(loaded.params.module(got), p.module(id));
        }
        // serialization is a pure function: re-encoding is identical
        assert_eq!(to_bytes(&loaded.params, &loaded.vocabs), bytes);
    }

    #[test]
    fn file_round_trip() {
        let (p, v) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &p, &v).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.vocabs, v);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let (p, v) = sample();
        let mut bytes = to_bytes(&p, &v);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(from_bytes(&bad_magic), Err(CheckpointError::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(matches!(from_bytes(&bad_version), Err(CheckpointError::Format(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(truncated), Err(CheckpointError::Format(_))));

        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load(&dir.path().join("nope.ckpt")),
            Err(CheckpointError::Io { .. })
        ));
    }
}
