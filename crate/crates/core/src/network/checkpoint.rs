//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SYMSEGCK" | u32 version | 32-byte config digest
//! u32 meta length | meta JSON (model configuration)
//! u32 tensor count | per tensor: u32 name length, name,
//!                    u32 rank, u64 dims.., f64 values..
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelConfig};
use crate::diffcore::DiffTensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYMSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Digest of the run configuration that produced the model.
    pub config_digest: [u8; 32],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.extend_from_slice(&self.config_digest);
        let meta = serde_json::to_vec(self.model.config()).expect("model config serializes");
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(&meta);
        let params = self.model.params();
        out.write_u32::<LittleEndian>(params.len() as u32).unwrap();
        for (name, _, t) in params {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in t.values() {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let fail = |r: &Cursor<&[u8]>, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: r.position(),
            message,
        };
        let truncated = |r: &Cursor<&[u8]>| fail(r, "truncated checkpoint".into());

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated(&r))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r))?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(&r, format!("unsupported checkpoint version {version}")));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest).map_err(|_| truncated(&r))?;

        let meta_len = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r))? as usize;
        let meta = take(&mut r, meta_len).ok_or_else(|| truncated(&r))?;
        let config: ModelConfig =
            serde_json::from_slice(meta).map_err(|e| fail(&r, format!("bad model metadata: {e}")))?;
        let mut model = Model::new(config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();

        let count = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r))? as usize;
        if count != expected.len() {
            return Err(fail(&r, format!("{count} tensors, model has {}", expected.len())));
        }
        let mut values = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let start = r.position();
            let name_len = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r))? as usize;
            let name = take(&mut r, name_len).ok_or_else(|| truncated(&r))?;
            if name != want_name.as_bytes() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start,
                    message: format!("expected tensor {want_name}, found {}", String::from_utf8_lossy(name)),
                });
            }
            let rank = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r))? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(|_| truncated(&r))?;
            if &shape != want_shape {
                return Err(fail(
                    &r,
                    format!("{want_name}: shape {shape:?}, expected {want_shape:?}"),
                ));
            }
            let n: usize = shape.iter().product();
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(|_| truncated(&r))?;
            values.push(DiffTensor::new(shape, v)?);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(fail(&r, "trailing bytes after last tensor".into()));
        }
        model.load_params(values)?;
        Ok(Checkpoint { model, config_digest })
    }
}

fn take<'a>(r: &mut Cursor<&'a [u8]>, n: usize) -> Option<&'a [u8]> {
    let start = r.position() as usize;
    let bytes = *r.get_ref();
    let slice = bytes.get(start..start.checked_add(n)?)?;
    r.set_position((start + n) as u64);
    Some(slice)
}

pub fn save_checkpoint(path: &Path, model: &Model, config_digest: [u8; 32]) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        config_digest,
    };
    crate::geometry::write_file(path, &ck.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
