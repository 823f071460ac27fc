//! Flat binary checkpoints.
//!
//! Layout: magic "UGPL", version u32, record count u64, then per record:
//! name length u16 + name bytes, shape rank u8 + dims u32 each, and the
//! values as 64-bit little-endian floats. Records cover parameters and
//! buffers (batch-norm running statistics) by name.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::RunError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UGPL";
const VERSION: u32 = 1;

pub fn save(store: &ParamStore, path: &Path) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(|e| RunError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io = |e| RunError::io(path.display().to_string(), e);
    let entries = store.named_entries();
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(entries.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(RunError::Checkpoint(format!("name too long: {name}")));
        }
        out.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io)?;
        out.write_all(name_bytes).map_err(io)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(RunError::Checkpoint(format!("rank too large for {name}")));
        }
        out.write_all(&[shape.len() as u8]).map_err(io)?;
        for &dim in shape {
            out.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<HashMap<String, Tensor>, RunError> {
    let file = fs::File::open(path).map_err(|e| RunError::io(path.display().to_string(), e))?;
    let mut reader = std::io::BufReader::new(file);
    let bad = |reason: String| RunError::Checkpoint(format!("{}: {reason}", path.display()));
    let io = |e| RunError::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    reader.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    reader.read_exact(&mut u64buf).map_err(io)?;
    let count = u64::from_le_bytes(u64buf);

    let mut entries = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        reader.read_exact(&mut u16buf).map_err(io)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        reader.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes).map_err(|e| bad(format!("bad name: {e}")))?;
        let mut rank = [0u8; 1];
        reader.read_exact(&mut rank).map_err(io)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            reader.read_exact(&mut u32buf).map_err(io)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            reader.read_exact(&mut f64buf).map_err(io)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        entries.insert(name, tensor);
    }
    Ok(entries)
}

/// Load a checkpoint into an existing store; names and shapes must match.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<(), RunError> {
    let entries = load(path)?;
    store
        .load_named(&entries)
        .map_err(RunError::Checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("ugpl_ckpt_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");

        let mut rng = RngState::new(3);
        let mut store = ParamStore::new();
        store.register("a.weight", Tensor::he_normal(vec![3, 4], 12, &mut rng));
        store.register("a.bias", Tensor::from_vec(vec![0.25, -1.5, 1e-300]));
        store.register_buffer("a.running_mean", Tensor::from_vec(vec![0.1, 0.2]));

        save(&store, &path).unwrap();
        let mut restored = store.clone();
        for pid in restored.param_ids().collect::<Vec<_>>() {
            let shape = restored.value(pid).shape().to_vec();
            *restored.value_mut(pid) = Tensor::zeros(shape);
        }
        load_into(&mut restored, &path).unwrap();
        for (a, b) in store.named_entries().iter().zip(restored.named_entries()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.data(), b.1.data());
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_starts_with_magic() {
        let dir = std::env::temp_dir().join("ugpl_ckpt_magic");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(vec![1.0]));
        save(&store, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"UGPL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = std::env::temp_dir().join("ugpl_ckpt_bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(load(&path), Err(RunError::Checkpoint(_))));
        fs::remove_dir_all(&dir).ok();
    }
}
