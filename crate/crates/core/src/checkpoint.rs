//! `CMA1` checkpoint files.
//!
//! Layout: magic `CMA1`, u32 version, u64 step, u32 length + config text,
//! u64 root seed, u32 tensor count, then per tensor a u32 name length, the
//! name, and a CMT1 record. Names are prefixed `adaptive/`, `evaluation/`,
//! `adam.m/` or `adam.v/`. All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{ComaError, Result};
use crate::model::param_specs;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"CMA1";
pub const VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["adaptive", "evaluation", "adam.m", "adam.v"];

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| ComaError::Format(format!("{what} too long to store")))
}

/// Serialized checkpoint bytes.
pub fn to_bytes<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, state.step());
    let text = state.config().to_text();
    put_u32(&mut buf, len_u32(text.len(), "config text")?);
    buf.extend_from_slice(text.as_bytes());
    put_u64(&mut buf, state.config().train.seed);
    let groups: [&[Tensor<T>]; 4] =
        [state.adaptive.values(), state.evaluation.values(), &state.adam.m, &state.adam.v];
    put_u32(&mut buf, len_u32(groups.iter().map(|g| g.len()).sum(), "tensor table")?);
    for (prefix, tensors) in GROUPS.iter().zip(groups) {
        for (spec, t) in state.adaptive.specs().iter().zip(tensors) {
            let name = format!("{prefix}/{}", spec.name);
            put_u32(&mut buf, len_u32(name.len(), "tensor name")?);
            buf.extend_from_slice(name.as_bytes());
            t.write_to(&mut buf)?;
        }
    }
    Ok(buf)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn truncated(e: std::io::Error) -> ComaError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ComaError::Format("checkpoint truncated".into())
    } else {
        ComaError::Io(e)
    }
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_string(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b).map_err(truncated)?;
    if b.len() != n {
        return Err(ComaError::Format("checkpoint truncated".into()));
    }
    String::from_utf8(b).map_err(|_| ComaError::Format("checkpoint string is not UTF-8".into()))
}

struct Header {
    step: u64,
    config: RunConfig,
    seed: u64,
    count: usize,
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(ComaError::Format(format!("bad checkpoint magic {magic:?}, expected CMA1")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(ComaError::Format(format!("checkpoint version {version}, this build reads {VERSION}")));
    }
    let step = get_u64(r)?;
    let config = RunConfig::parse(&get_string(r)?)
        .map_err(|e| ComaError::Format(format!("checkpoint config: {e}")))?;
    let seed = get_u64(r)?;
    let count = get_u32(r)? as usize;
    Ok(Header { step, config, seed, count })
}

/// Element type of the stored tensors, read without loading them.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let h = read_header(&mut r)?;
    if h.count == 0 {
        return Err(ComaError::Format("checkpoint holds no tensors".into()));
    }
    get_string(&mut r)?;
    let mut head = [0; 8];
    r.read_exact(&mut head).map_err(truncated)?;
    let tag = u32::from_le_bytes([head[4], head[5], head[6], head[7]]);
    DType::from_tag(tag).ok_or_else(|| ComaError::Format(format!("unknown dtype tag {tag}")))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = bytes;
    let h = read_header(&mut r)?;
    let mut config = h.config;
    if config.train.seed != h.seed {
        return Err(ComaError::Format("root seed disagrees with the stored configuration".into()));
    }
    config.train.seed = h.seed;
    let specs = param_specs(&config.model)?;
    if h.count != GROUPS.len() * specs.len() {
        return Err(ComaError::Format(format!(
            "checkpoint holds {} tensors, configuration needs {}",
            h.count,
            GROUPS.len() * specs.len()
        )));
    }
    let mut groups: Vec<Vec<Tensor<T>>> = Vec::with_capacity(GROUPS.len());
    for prefix in GROUPS {
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let name = get_string(&mut r)?;
            let want = format!("{prefix}/{}", spec.name);
            if name != want {
                return Err(ComaError::Format(format!("tensor {name:?} where {want:?} was expected")));
            }
            let t = Tensor::<T>::read_from(&mut r).map_err(|e| match e {
                ComaError::Io(io) => truncated(io),
                other => other,
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ComaError::Format(format!("{name}: shape {:?}, expected {:?}", t.shape(), spec.shape)));
            }
            tensors.push(t);
        }
        groups.push(tensors);
    }
    if !r.is_empty() {
        return Err(ComaError::Format(format!("{} trailing bytes after the tensor table", r.len())));
    }
    let v = groups.pop().expect("four groups");
    let m = groups.pop().expect("four groups");
    let evaluation = ParamStore::from_parts(specs.clone(), groups.pop().expect("four groups"))?;
    let adaptive = ParamStore::from_parts(specs, groups.pop().expect("four groups"))?;
    TrainState::from_parts(config, adaptive, evaluation, AdamState { m, v }, h.step)
}

pub fn load<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    from_bytes(&fs::read(path)?)
}
