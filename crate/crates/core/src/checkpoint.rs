//! Versioned parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"VGCK"
//! version    u32 (= 1)
//! spec_len   u32
//! spec       spec_len bytes of JSON: {"kind": "video"|"selection", "spec": {...}}
//! count      u32, number of parameter tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims rank × u64
//!   data     product(dims) × f64, row-major
//! ```
//!
//! f64 values are written bit-for-bit, so `load(save(x)) == x` exactly.
//! Selection checkpoints end with one extra tensor, `sel.embed_mean`, holding
//! the running embedding mean.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::optim::Params;
use crate::selection::{SelectionNet, SelectionSpec};
use crate::video_net::{NetSpec, VideoNet};
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"VGCK";
const VERSION: u32 = 1;
const EMBED_MEAN: &str = "sel.embed_mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "lowercase")]
pub enum ModelSpec {
    Video(NetSpec),
    Selection(SelectionSpec),
}

fn write_checkpoint(path: &Path, spec: &ModelSpec, params: &Params) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(spec).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_n(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact_n(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let b = read_exact_n(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelSpec, Params)> {
    let mut r = BufReader::new(File::open(path)?);
    if read_exact_n(&mut r, 4)? != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = read_u32(&mut r)? as usize;
    let spec: ModelSpec = serde_json::from_slice(&read_exact_n(&mut r, len)?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let count = read_u32(&mut r)?;
    let mut params = Params::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_exact_n(&mut r, nlen)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let bytes = read_exact_n(&mut r, n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, Tensor::new(dims, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((spec, params))
}

/// Checks names and shapes of `params` against a reference layout.
fn check_layout(found: &Params, expected: &Params) -> Result<()> {
    if found.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            found.len(),
            expected.len()
        )));
    }
    for ((n1, t1), (n2, t2)) in found.iter().zip(expected.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {n1} {:?} does not match model tensor {n2} {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_video(path: &Path, net: &VideoNet) -> Result<()> {
    write_checkpoint(path, &ModelSpec::Video(net.spec.clone()), &net.params)
}

pub fn save_selection(path: &Path, net: &SelectionNet) -> Result<()> {
    let mut all = net.params.clone();
    all.push(EMBED_MEAN, Tensor::from_vec(net.embed_mean.clone()));
    write_checkpoint(path, &ModelSpec::Selection(net.spec.clone()), &all)
}

/// Loads a classifier; with `expected` set, a different architecture is an error.
pub fn load_video(path: &Path, expected: Option<&NetSpec>) -> Result<VideoNet> {
    let (spec, params) = read_checkpoint(path)?;
    let ModelSpec::Video(spec) = spec else {
        return Err(Error::Format(format!(
            "{} is not a classifier checkpoint",
            path.display()
        )));
    };
    if let Some(e) = expected {
        if *e != spec {
            return Err(Error::Format(format!(
                "checkpoint {} was saved for a different classifier architecture",
                path.display()
            )));
        }
    }
    let reference = crate::video_net::build_toy_net(spec.clone(), 0)?;
    check_layout(&params, &reference.params)?;
    Ok(VideoNet { spec, params })
}

pub fn load_selection(path: &Path, expected: Option<&SelectionSpec>) -> Result<SelectionNet> {
    let (spec, params) = read_checkpoint(path)?;
    let ModelSpec::Selection(spec) = spec else {
        return Err(Error::Format(format!(
            "{} is not a selection-network checkpoint",
            path.display()
        )));
    };
    if let Some(e) = expected {
        if *e != spec {
            return Err(Error::Format(format!(
                "checkpoint {} was saved for a different selection network",
                path.display()
            )));
        }
    }
    let reference = crate::selection::build_selection_net(spec.clone(), 0)?;
    let mut expected_layout = reference.params.clone();
    expected_layout.push(EMBED_MEAN, Tensor::from_vec(reference.embed_mean));
    let mut params = params;
    check_layout(&params, &expected_layout)?;
    let (_, mean) = params.pop().expect("layout checked");
    Ok(SelectionNet {
        spec,
        params,
        embed_mean: mean.into_data(),
    })
}
