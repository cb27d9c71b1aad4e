//! Self-describing checkpoint container.
//!
//! Layout: magic, JSON metadata block, named parameter tensors with shapes,
//! then optional optimizer state (moments, step counter, schedule). Floats
//! are stored as raw little-endian bits so a write→read cycle reproduces
//! values exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::ModelError;
use crate::optim::OptimizerState;
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NMTCKPT1";

fn ck<T>(res: std::io::Result<T>) -> Result<T, ModelError> {
    res.map_err(ModelError::Io)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<(), ModelError> {
    ck(w.write_all(&v.to_le_bytes()))
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<(), ModelError> {
    ck(w.write_all(&v.to_le_bytes()))
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<(), ModelError> {
    ck(w.write_all(&v.to_bits().to_le_bytes()))
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<(), ModelError> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    ck(w.write_all(&buf))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<(), ModelError> {
    write_u32(w, s.len() as u32)?;
    ck(w.write_all(s.as_bytes()))
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>, ModelError> {
    let mut buf = vec![0u8; n];
    ck(r.read_exact(&mut buf))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let b = read_exact(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    let b = read_exact(r, 8)?;
    Ok(f64::from_bits(u64::from_le_bytes(b.try_into().unwrap())))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, ModelError> {
    let buf = read_exact(r, n * 8)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

fn read_str(r: &mut impl Read) -> Result<String, ModelError> {
    let n = read_u32(r)? as usize;
    let buf = read_exact(r, n)?;
    String::from_utf8(buf).map_err(|e| ModelError::Checkpoint(format!("bad utf8: {e}")))
}

pub fn write_checkpoint<M: Serialize>(
    path: &Path,
    meta: &M,
    params: &ParamSet,
    optimizer: Option<&OptimizerState>,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(ck(File::create(path))?);
    ck(w.write_all(MAGIC))?;
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| ModelError::Checkpoint(format!("meta encode: {e}")))?;
    write_u32(&mut w, meta_json.len() as u32)?;
    ck(w.write_all(&meta_json))?;

    write_u64(&mut w, params.len() as u64)?;
    for (name, t) in params.iter() {
        write_str(&mut w, name)?;
        ck(w.write_all(&[t.requires_grad() as u8]))?;
        write_u32(&mut w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u64(&mut w, d as u64)?;
        }
        write_f64s(&mut w, t.data())?;
    }

    match optimizer {
        None => ck(w.write_all(&[0u8]))?,
        Some(opt) => {
            ck(w.write_all(&[1u8]))?;
            write_u64(&mut w, opt.step)?;
            write_f64(&mut w, opt.base_lr)?;
            write_u64(&mut w, opt.warmup)?;
            write_f64(&mut w, opt.beta1)?;
            write_f64(&mut w, opt.beta2)?;
            write_f64(&mut w, opt.eps)?;
            write_f64(&mut w, opt.clip_norm)?;
            write_u64(&mut w, opt.moments.len() as u64)?;
            for (name, (m, v)) in &opt.moments {
                write_str(&mut w, name)?;
                write_u64(&mut w, m.len() as u64)?;
                write_f64s(&mut w, m)?;
                write_f64s(&mut w, v)?;
            }
        }
    }
    ck(w.flush())
}

pub fn read_checkpoint<M: DeserializeOwned>(
    path: &Path,
) -> Result<(M, ParamSet, Option<OptimizerState>), ModelError> {
    let mut r = BufReader::new(ck(File::open(path))?);
    let magic = read_exact(&mut r, 8)?;
    if magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta_buf = read_exact(&mut r, meta_len)?;
    let meta: M = serde_json::from_slice(&meta_buf)
        .map_err(|e| ModelError::Checkpoint(format!("meta decode: {e}")))?;

    let count = read_u64(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rg = read_exact(&mut r, 1)?[0] != 0;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f64s(&mut r, numel)?;
        let mut t = Tensor::new(shape, data)
            .map_err(|e| ModelError::Checkpoint(format!("tensor {name}: {e}")))?;
        if rg {
            t = t.with_grad();
        }
        params.insert(name, t);
    }

    let has_opt = read_exact(&mut r, 1)?[0] != 0;
    let optimizer = if has_opt {
        let step = read_u64(&mut r)?;
        let base_lr = read_f64(&mut r)?;
        let warmup = read_u64(&mut r)?;
        let mut opt = OptimizerState::new(base_lr, warmup);
        opt.step = step;
        opt.beta1 = read_f64(&mut r)?;
        opt.beta2 = read_f64(&mut r)?;
        opt.eps = read_f64(&mut r)?;
        opt.clip_norm = read_f64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            let m = read_f64s(&mut r, len)?;
            let v = read_f64s(&mut r, len)?;
            opt.moments.insert(name, (m, v));
        }
        Some(opt)
    } else {
        None
    };
    Ok((meta, params, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Meta {
        kind: String,
        alpha: f64,
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("natmt-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");

        let mut params = ParamSet::new();
        // values chosen to exercise exact bit patterns, including subnormals
        params.insert(
            "w",
            Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-310, 2.5e17])
                .unwrap()
                .with_grad(),
        );
        params.insert("b", Tensor::new(vec![3], vec![0.0, -0.0, 42.0]).unwrap());
        let mut opt = OptimizerState::new(0.002, 40);
        opt.step = 17;
        opt.moments
            .insert("w".into(), (vec![1.0, 2.0, 3.0, 4.0], vec![0.5; 4]));

        let meta = Meta {
            kind: "teacher".into(),
            alpha: 1.1,
        };
        write_checkpoint(&path, &meta, &params, Some(&opt)).unwrap();
        let (meta2, params2, opt2): (Meta, _, _) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(params2.len(), 2);
        for (name, t) in params.iter() {
            let t2 = params2.get(name).unwrap();
            assert_eq!(t.shape(), t2.shape());
            assert_eq!(t.requires_grad(), t2.requires_grad());
            for (a, b) in t.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let opt2 = opt2.unwrap();
        assert_eq!(opt2.step, 17);
        assert_eq!(opt2.warmup, 40);
        assert_eq!(opt2.moments.get("w").unwrap().0, vec![1.0, 2.0, 3.0, 4.0]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("natmt-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let res: Result<(Meta, _, _), _> = read_checkpoint(&path);
        assert!(res.is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
