//! Self-describing binary container for model parameters.
//!
//! Layout: magic `STEGOLAB`, u32 version, u32 tensor count, then per tensor:
//! u16 name length, name bytes (utf-8), u8 rank, u64 dims, f64 values.
//! All integers and floats little-endian.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"STEGOLAB";
const VERSION: u32 = 1;

pub fn save_params(path: &Path, named: &[(String, &Tensor)]) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |detail: &str| Error::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(fail("truncated container"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fail("name is not utf-8"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, Tensor::from_vec(&shape, data)?));
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok(named)
}

/// Restore tensors into a model's canonical parameter order by name.
pub fn assign_by_name(
    loaded: Vec<(String, Tensor)>,
    targets: &mut [(&str, &mut Tensor)],
) -> Result<()> {
    let mut map: std::collections::BTreeMap<String, Tensor> = loaded.into_iter().collect();
    for (name, slot) in targets.iter_mut() {
        let tensor = map
            .remove(*name)
            .ok_or_else(|| Error::invalid(format!("checkpoint missing parameter {name:?}")))?;
        if tensor.shape() != slot.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{name}: {:?} vs expected {:?}", tensor.shape(), slot.shape()),
            ));
        }
        **slot = tensor;
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::invalid(format!("checkpoint has unused parameter {extra:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = std::env::temp_dir().join("stegolab-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.bin");
        let a = Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 3.0, -0.5]).unwrap();
        let b = Tensor::scalar(42.0);
        save_params(&p, &[("conv.w".into(), &a), ("head.b".into(), &b)]).unwrap();
        let loaded = load_params(&p).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "conv.w");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);
    }

    #[test]
    fn corrupted_container_rejected() {
        let dir = std::env::temp_dir().join("stegolab-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.bin");
        std::fs::write(&p, b"NOTMAGIC").unwrap();
        assert!(load_params(&p).is_err());
    }
}
