//! On-disk kernel caches.
//!
//! One file per cache identity, named by its SHA-256. Layout (little
//! endian): magic, identity length and bytes, `n`, `n_d`, then the full
//! `k`, `l` and per-node `γ` tables as `f64`, closed by a SHA-256 of
//! everything before it. Anything that fails to check out is rebuilt.

use std::fs;
use std::path::{Path, PathBuf};

use hypbstep_core::{build_cache, KernelCache, ScenarioConfig, SquareKernel, TriKernel};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 8] = b"HYPBKC01";

/// Where a cache came from, for the log line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Built,
    Loaded,
    /// A file existed but was unreadable or stale.
    Rebuilt,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cache_path(dir: &Path, identity: &str) -> PathBuf {
    dir.join(format!(
        "{}.kcache",
        hex(&Sha256::digest(identity.as_bytes()))
    ))
}

fn encode(identity: &str, cache: &KernelCache) -> Vec<u8> {
    let n = cache.grid().len();
    let nodes = cache.nodes();
    let mut out = Vec::with_capacity(64 + identity.len() + 8 * n * n * (2 + nodes.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(identity.len() as u64).to_le_bytes());
    out.extend_from_slice(identity.as_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(nodes.len() as u64).to_le_bytes());
    let tables = [cache.k().values(), cache.l().values()]
        .into_iter()
        .chain(nodes.iter().map(|node| node.gamma.values()));
    for table in tables {
        for v in table {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(len)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn table(&mut self, len: usize) -> Option<Vec<f64>> {
        let raw = self.take(len.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        )
    }
}

/// `None` on any mismatch: bad magic, checksum, identity or shape.
fn decode(bytes: &[u8], identity: &str, s: &ScenarioConfig) -> Option<KernelCache> {
    let body_len = bytes.len().checked_sub(32)?;
    let (body, digest) = bytes.split_at(body_len);
    if Sha256::digest(body).as_slice() != digest {
        return None;
    }
    let mut r = Reader { bytes: body, at: 0 };
    if r.take(8)? != MAGIC {
        return None;
    }
    let id_len = usize::try_from(r.u64()?).ok()?;
    if r.take(id_len)? != identity.as_bytes() {
        return None;
    }
    let (n, n_d) = (r.u64()? as usize, r.u64()? as usize);
    if n != s.n_x || n_d != s.n_d {
        return None;
    }
    let grid = s.grid();
    let k = TriKernel::from_values(grid, r.table(n * n)?).ok()?;
    let l = TriKernel::from_values(grid, r.table(n * n)?).ok()?;
    let mut gammas = Vec::with_capacity(n_d);
    for _ in 0..n_d {
        gammas.push(SquareKernel::from_values(grid, r.table(n * n)?).ok()?);
    }
    if r.at != body.len() {
        return None;
    }
    let coeffs = s.coefficients().ok()?;
    KernelCache::from_parts(coeffs, s.solver_options(), s.bounds, k, l, gammas).ok()
}

/// Loads the cache for `s` from `dir`, or builds it and stores it there.
/// Without a directory the cache is built in memory only.
pub fn load_or_build(s: &ScenarioConfig, dir: Option<&Path>) -> CliResult<(KernelCache, Origin)> {
    let build = || -> CliResult<KernelCache> {
        let coeffs = s
            .coefficients()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(build_cache(&coeffs, s.bounds, s.n_d, &s.solver_options())?)
    };
    let Some(dir) = dir else {
        return Ok((build()?, Origin::Built));
    };
    let identity = s.cache_identity();
    let path = cache_path(dir, &identity);
    let mut origin = Origin::Built;
    if let Ok(bytes) = fs::read(&path) {
        match decode(&bytes, &identity, s) {
            Some(cache) => return Ok((cache, Origin::Loaded)),
            None => origin = Origin::Rebuilt,
        }
    }
    let cache = build()?;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let tmp = path.with_extension("kcache.tmp");
    fs::write(&tmp, encode(&identity, &cache)).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, &path).map_err(CliError::io(&path))?;
    Ok((cache, origin))
}
