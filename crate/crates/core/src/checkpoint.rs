//! Self-describing checkpoint files.
//!
//! Layout: an eight-byte magic+version tag, a text header of `key value`
//! lines (the run configuration), then each parameter as name, shape, and
//! raw little-endian f64 values. Parameters are written in name order, so
//! identical state produces identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::graph::{EngineError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HVCKPT01";

pub fn save<T: Scalar>(
    path: &Path,
    header: &[(String, String)],
    store: &ParamStore<T>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;

    let mut head = String::new();
    for (k, v) in header {
        head.push_str(k);
        head.push(' ');
        head.push_str(v);
        head.push('\n');
    }
    w.write_all(&(head.len() as u32).to_le_bytes())?;
    w.write_all(head.as_bytes())?;

    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Vec<(String, String)>, ParamStore<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |what: &str| EngineError::MalformedCheckpoint(what.to_string());

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("unrecognized magic"));
    }

    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let head_len = u32::from_le_bytes(u32buf) as usize;
    let mut head = vec![0u8; head_len];
    r.read_exact(&mut head)?;
    let head = String::from_utf8(head).map_err(|_| bad("header is not utf-8"))?;
    let header: Vec<(String, String)> = head
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| match l.split_once(' ') {
            Some((k, v)) => Ok((k.to_string(), v.to_string())),
            None => Err(bad(&format!("malformed header line '{l}'"))),
        })
        .collect::<Result<_>>()?;

    r.read_exact(&mut u32buf)?;
    let n_params = u32::from_le_bytes(u32buf) as usize;
    let mut store = ParamStore::new();
    let mut u64buf = [0u8; 8];
    for _ in 0..n_params {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;

        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(bad(&format!("implausible rank {rank} for '{name}'")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u64buf)?;
            data.push(T::from_f64(f64::from_le_bytes(u64buf)));
        }
        store.register(&name, Tensor::from_vec(&shape, data))?;
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{normal_tensor, rng_for};

    #[test]
    fn round_trip_preserves_header_and_values() {
        let dir = std::env::temp_dir().join("hv-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(1, "ckpt");
        store.register("w", normal_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        store.register("b", Tensor::scalar(0.25f32)).unwrap();
        let header =
            vec![("format".to_string(), "1".to_string()), ("model.k".to_string(), "4".to_string())];
        save(&path, &header, &store).unwrap();

        let (h2, s2) = load::<f32>(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(s2.names(), store.names());
        for name in store.names() {
            let a = store.get(&name).unwrap();
            let b = s2.get(&name).unwrap();
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = std::env::temp_dir().join("hv-ckpt-det");
        std::fs::create_dir_all(&dir).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(2, "ckpt-det");
        store.register("a", normal_tensor(&mut rng, &[5], 0.3)).unwrap();
        let header = vec![("seed".to_string(), "2".to_string())];
        let p1 = dir.join("one.ckpt");
        let p2 = dir.join("two.ckpt");
        save(&p1, &header, &store).unwrap();
        save(&p2, &header, &store).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = std::env::temp_dir().join("hv-ckpt-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load::<f32>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
