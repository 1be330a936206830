//! Binary checkpoint container.
//!
//! ```text
//! "TKD1"                      magic
//! u32                         tensor count
//! per tensor:
//!   u16 name length, name     UTF-8
//!   u8 rank, rank × u32 dims
//!   f32 × numel               raw values
//! u32 length, UTF-8 block     architecture, one key=value per line
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::nn::{ArchKind, ArchitectureSpec, Network, NnError};

pub const MAGIC: &[u8; 4] = b"TKD1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint magic {found:?}: expected \"TKD1\"")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint truncated: {what} needs {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        what: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checkpoint has {0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("unknown architecture kind `{0}`")]
    UnknownArch(String),
    #[error("malformed architecture block: {0}")]
    Arch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A network plus the generation that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub generation: usize,
}

pub fn encode(net: &Network, generation: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend((net.params().len() as u32).to_le_bytes());
    for (name, t) in net.params() {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        t.shape().iter().for_each(|&d| out.extend((d as u32).to_le_bytes()));
        t.data().iter().for_each(|v| out.extend(v.to_le_bytes()));
    }
    let arch = arch_block(net.spec(), net.seed(), generation);
    out.extend((arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn arch_block(spec: &ArchitectureSpec, seed: u64, generation: usize) -> String {
    format!(
        "kind={}\ninput_dims={}\nnum_classes={}\nbase_widths={}\nwidth_multiplier={}\nseed={}\ngeneration={}\n",
        spec.kind,
        join(&spec.input_dims),
        spec.num_classes,
        join(&spec.base_widths),
        spec.width_multiplier,
        seed,
        generation
    )
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated { what: what(), offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, || what.to_string())?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, || "magic".into()).map_err(|_| CheckpointError::BadMagic { found: bytes.to_vec() })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let count = r.u32("tensor count")?;
    let mut arrays = Vec::with_capacity(count as usize);
    for i in 0..count {
        let b = r.take(2, || format!("name length of tensor {i}"))?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = String::from_utf8(r.take(len, || format!("name of tensor {i}"))?.to_vec())
            .map_err(|_| CheckpointError::Arch(format!("tensor {i} name is not UTF-8")))?;
        let rank = r.take(1, || format!("rank of `{name}`"))?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of `{name}`"))? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, || format!("values of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        arrays.push((name, dims, data));
    }
    let len = r.u32("architecture length")? as usize;
    let block = std::str::from_utf8(r.take(len, || "architecture block".into())?)
        .map_err(|_| CheckpointError::Arch("block is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    let (spec, seed, generation) = parse_arch(block)?;
    Ok(Checkpoint { network: Network::from_params(spec, arrays, seed)?, generation })
}

fn parse_arch(block: &str) -> Result<(ArchitectureSpec, u64, usize)> {
    let mut fields = std::collections::HashMap::new();
    for line in block.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Arch(format!("line `{line}` has no `=`")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| CheckpointError::Arch(format!("missing `{k}`")));
    let bad = |k: &str| CheckpointError::Arch(format!("invalid `{k}`"));
    let list = |k: &str| -> Result<Vec<usize>> {
        get(k)?.split(',').map(|x| x.trim().parse().map_err(|_| bad(k))).collect()
    };
    let kind_text = get("kind")?;
    let kind: ArchKind = kind_text.parse().map_err(|_| CheckpointError::UnknownArch(kind_text.to_string()))?;
    let spec = ArchitectureSpec {
        kind,
        input_dims: list("input_dims")?,
        num_classes: get("num_classes")?.parse().map_err(|_| bad("num_classes"))?,
        base_widths: list("base_widths")?,
        width_multiplier: get("width_multiplier")?.parse().map_err(|_| bad("width_multiplier"))?,
    };
    let seed = get("seed")?.parse().map_err(|_| bad("seed"))?;
    let generation = get("generation")?.parse().map_err(|_| bad("generation"))?;
    Ok((spec, seed, generation))
}

pub fn save_checkpoint(net: &Network, generation: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net, generation)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}
