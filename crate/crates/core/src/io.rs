//! PVMT tensor files, P5 graymaps and checkpoint directories.
//!
//! PVMT layout: `b"PVMT"`, version byte, dtype byte (0 f32, 1 f64,
//! 2 u8 mask), `u32` rank, `rank × u32` dims, row-major payload. All
//! integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, ValidityMask};

pub const MAGIC: &[u8; 4] = b"PVMT";
pub const VERSION: u8 = 1;
pub const MASK_DTYPE: u8 = 2;
const MAX_RANK: usize = 16;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum Pvmt {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Mask(ValidityMask),
}

fn write_header(w: &mut impl Write, dtype: u8, dims: &[usize]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype])?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    write_header(w, T::DTYPE_CODE, t.dims())?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        match T::DTYPE_CODE {
            0 => buf.extend_from_slice(&v.to_f32().expect("f32").to_le_bytes()),
            _ => buf.extend_from_slice(&v.to_f64().expect("f64").to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_mask(w: &mut impl Write, m: &ValidityMask) -> Result<()> {
    write_header(w, MASK_DTYPE, m.dims())?;
    w.write_all(&m.to_u8())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_pvmt(r: &mut impl Read) -> Result<Pvmt> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = head[5];
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} too large")));
    }
    let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let width = match dtype {
        0 => 4,
        1 => 8,
        MASK_DTYPE => 1,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * width {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", payload.len(), n * width)));
    }
    Ok(match dtype {
        0 => Pvmt::F32(Tensor::new(dims, payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())?),
        1 => Pvmt::F64(Tensor::new(dims, payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())?),
        _ => Pvmt::Mask(ValidityMask::from_u8(dims, &payload)?),
    })
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    match read_pvmt(r)? {
        Pvmt::F32(t) if T::DTYPE_CODE == 0 => Ok(t.cast()),
        Pvmt::F64(t) if T::DTYPE_CODE == 1 => Ok(t.cast()),
        other => Err(Error::Format(format!("expected dtype {}, found {}", T::DTYPE_CODE, dtype_name(&other)))),
    }
}

pub fn read_mask(r: &mut impl Read) -> Result<ValidityMask> {
    match read_pvmt(r)? {
        Pvmt::Mask(m) => Ok(m),
        other => Err(Error::Format(format!("expected a mask, found {}", dtype_name(&other)))),
    }
}

fn dtype_name(p: &Pvmt) -> &'static str {
    match p {
        Pvmt::F32(_) => "f32",
        Pvmt::F64(_) => "f64",
        Pvmt::Mask(_) => "mask",
    }
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(&mut BufReader::new(fs::File::open(path)?))
}

pub fn save_mask(path: impl AsRef<Path>, m: &ValidityMask) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_mask(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<ValidityMask> {
    read_mask(&mut BufReader::new(fs::File::open(path)?))
}

/// Binary graymap: valid pixels white, invalid black.
pub fn write_pgm(w: &mut impl Write, m: &ValidityMask) -> Result<()> {
    let (h, wd) = m.hw()?;
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let px: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&px)?;
    Ok(())
}

pub fn save_pgm(path: impl AsRef<Path>, m: &ValidityMask) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_pgm(&mut w, m)?;
    w.flush()?;
    Ok(())
}

/// Parameters loaded from a checkpoint directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: BTreeMap<String, Tensor<f32>>,
}

fn file_name(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
    format!("{safe}.pvmt")
}

fn shape_string(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes one PVMT file per parameter and a manifest of
/// `name file shape config_hash` lines.
pub fn save_checkpoint(dir: impl AsRef<Path>, params: &BTreeMap<String, Tensor<f32>>, config_hash: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut used = BTreeMap::new();
    for (name, t) in params {
        if name.chars().any(char::is_whitespace) {
            return Err(Error::Format(format!("parameter name `{name}` contains whitespace")));
        }
        let file = file_name(name);
        if let Some(other) = used.insert(file.clone(), name) {
            return Err(Error::Format(format!("`{name}` and `{other}` map to the same file")));
        }
        save_tensor(dir.join(&file), t)?;
        manifest.push_str(&format!("{name} {file} {} {config_hash}\n", shape_string(t.dims())));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Loads a checkpoint; a mismatching `expected_hash` is an error.
pub fn load_checkpoint(dir: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut params = BTreeMap::new();
    let mut config_hash: Option<String> = None;
    for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, file, shape, hash] = fields[..] else {
            return Err(Error::Format(format!("manifest line {}: expected 4 fields", no + 1)));
        };
        match &config_hash {
            None => config_hash = Some(hash.to_string()),
            Some(h) if h != hash => return Err(Error::Format(format!("manifest line {}: mixed config hashes", no + 1))),
            Some(_) => {}
        }
        let t: Tensor<f32> = load_tensor(dir.join(file))?;
        if shape_string(t.dims()) != shape {
            return Err(Error::Format(format!("{name}: manifest shape {shape}, file shape {}", shape_string(t.dims()))));
        }
        params.insert(name.to_string(), t);
    }
    let config_hash = config_hash.ok_or_else(|| Error::Format("empty manifest".into()))?;
    if let Some(expected) = expected_hash {
        if expected != config_hash {
            return Err(Error::Format(format!("config hash mismatch: checkpoint {config_hash}, config {expected}")));
        }
    }
    Ok(Checkpoint { config_hash, params })
}
