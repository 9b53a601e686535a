//! Binary checkpoint format.
//!
//! Layout, all integers `u32` little-endian: magic `HSGT`, version, tensor
//! count, then per tensor the name length, UTF-8 name bytes, rank, extents,
//! and the values as `f32` little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSGT";
pub const VERSION: u32 = 1;

/// Largest step count stored exactly in an `f32`.
const MAX_EXACT_STEP: u64 = 1 << 24;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, &Tensor<f32>)]) -> std::io::Result<()> {
    let u32_le = |v: usize| (v as u32).to_le_bytes();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_le(tensors.len()))?;
    for (name, t) in tensors {
        w.write_all(&u32_le(name.len()))?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_le(t.rank()))?;
        for &e in t.shape() {
            w.write_all(&u32_le(e))?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated values of `{name}`: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &Params<f32>) -> Result<()> {
    let tensors: Vec<_> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    save(path, &tensors)
}

fn save(path: &Path, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(file))
}

/// Copies `tensors` into same-named parameters, requiring an exact match of names and shapes.
fn assign(params: &mut Params<f32>, tensors: Vec<(String, Tensor<f32>)>, prefix: &str) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let mut values = Vec::with_capacity(params.len());
    for p in params.iter() {
        let t = by_name.remove(&format!("{prefix}{}", p.name)).ok_or_else(|| Error::Parameter {
            name: p.name.clone(),
            detail: "missing from checkpoint".into(),
        })?;
        if t.shape() != p.value.shape() {
            return Err(Error::Parameter {
                name: p.name.clone(),
                detail: format!("checkpoint shape {:?}, model shape {:?}", t.shape(), p.value.shape()),
            });
        }
        values.push(t);
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Parameter {
            name: extra.clone(),
            detail: "present in checkpoint but not in the model".into(),
        });
    }
    for (p, t) in params.iter_mut().zip(values) {
        p.value = t;
    }
    Ok(())
}

/// Loads parameter values saved by [`save_params`].
pub fn load_params(path: &Path, params: &mut Params<f32>) -> Result<()> {
    assign(params, load(path)?, "")
}

pub fn save_optimizer(path: &Path, opt: &Adam<f32>, params: &Params<f32>) -> Result<()> {
    if opt.step >= MAX_EXACT_STEP {
        return Err(Error::Checkpoint(format!("step {} too large to store", opt.step)));
    }
    let step = Tensor::scalar(opt.step as f32);
    let mut tensors = vec![("step".to_string(), &step)];
    for (p, (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
        tensors.push((format!("m.{}", p.name), m));
        tensors.push((format!("v.{}", p.name), v));
    }
    save(path, &tensors)
}

/// Restores moments and step count saved by [`save_optimizer`].
pub fn load_optimizer(path: &Path, opt: &mut Adam<f32>, params: &Params<f32>) -> Result<()> {
    let mut tensors = load(path)?;
    let pos = tensors
        .iter()
        .position(|(n, _)| n == "step")
        .ok_or_else(|| Error::Checkpoint("optimizer state has no step".into()))?;
    let step = tensors.remove(pos).1.data()[0];
    let (m, v): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with("m."));
    let mut moments = params.clone();
    assign(&mut moments, m, "m.")?;
    opt.m = moments.iter().map(|p| p.value.clone()).collect();
    assign(&mut moments, v, "v.")?;
    opt.v = moments.iter().map(|p| p.value.clone()).collect();
    opt.step = step as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use crate::rng::Rng;

    fn params() -> Params<f32> {
        let mut p = Params::new();
        let mut rng = Rng::new(2);
        p.add_uniform("a.weight", &[3, 4], 1.0, &mut rng).unwrap();
        p.add_uniform("b", &[5], 1.0, &mut rng).unwrap();
        p.add("c", Tensor::new(&[1], vec![f32::MIN_POSITIVE / 3.0]).unwrap()).unwrap();
        p
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.hsgt");
        let p = params();
        save_params(&path, &p).unwrap();
        let mut q = params();
        q.iter_mut().for_each(|x| x.value.data_mut().fill(0.0));
        load_params(&path, &mut q).unwrap();
        for (a, b) in p.iter().zip(q.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"HSGT");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 3, 0, 0, 0]);
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.hsgt");
        save_params(&path, &params()).unwrap();
        let mut other = Params::new();
        other.add("a.weight", Tensor::zeros(&[4, 3])).unwrap();
        match load_params(&path, &mut other) {
            Err(Error::Parameter { name, .. }) => assert_eq!(name, "a.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bytes = Vec::new();
        let t = Tensor::<f32>::zeros(&[2]);
        write_tensors(&mut bytes, &[("x".into(), &t)]).unwrap();
        assert!(read_tensors(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_tensors(&extra[..]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_tensors(&bad[..]).is_err());
        assert_eq!(read_tensors(&bytes[..]).unwrap()[0].1, t);
    }

    #[test]
    fn optimizer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.hsgt");
        let mut p = params();
        p.iter_mut().for_each(|x| x.grad.data_mut().fill(0.3));
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p).unwrap();
        opt.update(&mut p).unwrap();
        save_optimizer(&path, &opt, &p).unwrap();
        let mut back = Adam::new(AdamConfig::default(), &p);
        load_optimizer(&path, &mut back, &p).unwrap();
        assert_eq!(back.step, 2);
        assert_eq!(back.m, opt.m);
        assert_eq!(back.v, opt.v);
    }
}
