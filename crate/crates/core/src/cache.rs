//! File-backed store of precomputed interacted clusters, keyed by user id.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMQC" | version u32 | N u32 | W u32 | D u32 | count u64
//! count × ( user_id u64 | mask ⌈N·W/8⌉ bytes | N·W·D f32 )
//! CRC32 u32 over every preceding byte
//! ```
//!
//! Records are strictly ascending by user id, so lookups binary-search a
//! fixed-stride array.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::atomic::write_atomic;
use crate::data::InstanceSource;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{InteractedClusters, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DMQC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 8;
const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheDims {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub dim: usize,
}

impl CacheDims {
    pub fn of(model: &Model) -> Self {
        Self {
            num_codebooks: model.config.num_codebooks,
            codebook_size: model.config.codebook_size,
            dim: model.config.dim,
        }
    }

    pub fn clusters(&self) -> usize {
        self.num_codebooks * self.codebook_size
    }

    fn mask_bytes(&self) -> usize {
        self.clusters().div_ceil(8)
    }

    pub fn record_len(&self) -> usize {
        8 + self.mask_bytes() + 4 * self.clusters() * self.dim
    }
}

/// One user's cached clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedInterest {
    pub user_id: u64,
    pub mask: Vec<bool>,
    /// `N·W·D` values, row-major by cluster.
    pub values: Vec<f32>,
}

impl CachedInterest {
    pub fn new(user_id: u64, clusters: &InteractedClusters) -> Self {
        Self {
            user_id,
            mask: clusters.mask.clone(),
            values: clusters.values.values().to_vec(),
        }
    }

    pub fn to_clusters(&self, dims: CacheDims) -> Result<InteractedClusters> {
        Ok(InteractedClusters {
            values: Tensor::new(vec![dims.clusters(), dims.dim], self.values.clone())?,
            mask: self.mask.clone(),
        })
    }

    pub fn encode(&self, dims: CacheDims, out: &mut Vec<u8>) -> Result<()> {
        if self.mask.len() != dims.clusters() || self.values.len() != dims.clusters() * dims.dim {
            return Err(Error::contract(format!(
                "record for user {} does not match cache dims {dims:?}",
                self.user_id
            )));
        }
        out.extend_from_slice(&self.user_id.to_le_bytes());
        let mut bits = vec![0u8; dims.mask_bytes()];
        for (k, &m) in self.mask.iter().enumerate() {
            if m {
                bits[k / 8] |= 1 << (k % 8);
            }
        }
        out.extend_from_slice(&bits);
        for &v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Decodes one record; `offset` is its position in the file, used in
    /// error messages.
    pub fn decode(bytes: &[u8], dims: CacheDims, offset: u64) -> Result<Self> {
        if bytes.len() != dims.record_len() {
            return Err(Error::Store {
                offset,
                message: format!("record is {} bytes, expected {}", bytes.len(), dims.record_len()),
            });
        }
        let user_id = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let bits = &bytes[8..8 + dims.mask_bytes()];
        let clusters = dims.clusters();
        let mask: Vec<bool> = (0..clusters).map(|k| bits[k / 8] & (1 << (k % 8)) != 0).collect();
        let spare = dims.mask_bytes() * 8 - clusters;
        if spare > 0 && bits[bits.len() - 1] >> (8 - spare) != 0 {
            return Err(Error::Store {
                offset,
                message: "mask has bits set past the last cluster".into(),
            });
        }
        let values: Vec<f32> = bytes[8 + dims.mask_bytes()..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for (k, row) in values.chunks_exact(dims.dim).enumerate() {
            if !mask[k] && row.iter().any(|&v| v != 0.0) {
                return Err(Error::Store {
                    offset,
                    message: format!("empty cluster {k} of user {user_id} holds nonzero values"),
                });
            }
        }
        Ok(Self { user_id, mask, values })
    }
}

fn header(dims: CacheDims, count: u64) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    for d in [dims.num_codebooks, dims.codebook_size, dims.dim] {
        h.extend_from_slice(&(d as u32).to_le_bytes());
    }
    h.extend_from_slice(&count.to_le_bytes());
    h
}

/// Writes records (ascending by user id) to `path` atomically.
pub fn write_cache(path: &Path, dims: CacheDims, records: &[CachedInterest]) -> Result<()> {
    write_cache_with(path, dims, records.len() as u64, |emit| {
        records.iter().try_for_each(emit)
    })
}

/// Streaming writer: `produce` is handed an `emit` callback and must call it
/// exactly `count` times in ascending user-id order.
fn write_cache_with<P>(path: &Path, dims: CacheDims, count: u64, produce: P) -> Result<()>
where
    P: FnOnce(&mut dyn FnMut(&CachedInterest) -> Result<()>) -> Result<()>,
{
    write_atomic(path, |w| {
        let mut crc = crc32fast::Hasher::new();
        let head = header(dims, count);
        crc.update(&head);
        w.write_all(&head)?;
        let mut written = 0u64;
        let mut last: Option<u64> = None;
        let mut buf = Vec::with_capacity(dims.record_len());
        let mut emit = |r: &CachedInterest| -> Result<()> {
            if last.is_some_and(|prev| r.user_id <= prev) {
                return Err(Error::contract(format!(
                    "cache records must be strictly ascending; {} follows {}",
                    r.user_id,
                    last.unwrap()
                )));
            }
            last = Some(r.user_id);
            buf.clear();
            r.encode(dims, &mut buf)?;
            crc.update(&buf);
            w.write_all(&buf)?;
            written += 1;
            Ok(())
        };
        produce(&mut emit)?;
        if written != count {
            return Err(Error::contract(format!("announced {count} records, wrote {written}")));
        }
        w.write_all(&crc.finalize().to_le_bytes())?;
        Ok(())
    })
}

/// Number of users processed per parallel chunk during precompute.
const PRECOMPUTE_CHUNK: usize = 256;

/// Computes noise-free interacted clusters for every distinct user in
/// `source` (the first instance of each user wins) and writes the cache.
/// Returns the number of records.
pub fn precompute<S: InstanceSource + ?Sized>(model: &Model, source: &S, path: &Path, exec: Exec) -> Result<usize> {
    if model.dmqn.is_none() {
        return Err(Error::contract("only the quantized model has cacheable clusters"));
    }
    let mut first: BTreeMap<u64, usize> = BTreeMap::new();
    for i in 0..source.len() {
        first.entry(source.instance(i).user_id).or_insert(i);
    }
    let users: Vec<(u64, usize)> = first.into_iter().collect();
    let dims = CacheDims::of(model);
    write_cache_with(path, dims, users.len() as u64, |mut emit| {
        for chunk in users.chunks(PRECOMPUTE_CHUNK) {
            let records = exec.try_map(chunk.len(), |j| {
                let (user_id, idx) = chunk[j];
                let clusters = model.interest_clusters(&source.instance(idx))?;
                Ok::<_, Error>(CachedInterest::new(user_id, &clusters))
            })?;
            records.iter().try_for_each(&mut emit)?;
        }
        Ok(())
    })?;
    Ok(users.len())
}

/// An opened, CRC-verified cache file held in memory.
#[derive(Debug, Clone)]
pub struct InterestCache {
    dims: CacheDims,
    count: usize,
    bytes: Vec<u8>,
}

impl InterestCache {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Store {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Store {
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(err(0, format!("file is {} bytes, shorter than a header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(err(0, "bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let dims = CacheDims {
            num_codebooks: u32_at(8) as usize,
            codebook_size: u32_at(12) as usize,
            dim: u32_at(16) as usize,
        };
        if dims.clusters() == 0 || dims.dim == 0 {
            return Err(err(8, "zero cache dimension".into()));
        }
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let body = bytes.len() - HEADER_LEN - CRC_LEN;
        let expected = (count as u128) * dims.record_len() as u128;
        if expected != body as u128 {
            return Err(err(
                HEADER_LEN,
                format!("{count} records need {expected} bytes, found {body}"),
            ));
        }
        let crc_at = bytes.len() - CRC_LEN;
        let stored = u32::from_le_bytes(bytes[crc_at..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[..crc_at]);
        if stored != actual {
            return Err(err(crc_at, format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let cache = Self {
            dims,
            count: count as usize,
            bytes,
        };
        for i in 1..cache.count {
            if cache.user_at(i) <= cache.user_at(i - 1) {
                return Err(err(
                    cache.offset(i),
                    format!("user ids not strictly ascending at record {i}"),
                ));
            }
        }
        Ok(cache)
    }

    pub fn dims(&self) -> CacheDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn offset(&self, i: usize) -> usize {
        HEADER_LEN + i * self.dims.record_len()
    }

    fn user_at(&self, i: usize) -> u64 {
        let o = self.offset(i);
        u64::from_le_bytes(self.bytes[o..o + 8].try_into().unwrap())
    }

    pub fn user_ids(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.count).map(|i| self.user_at(i))
    }

    pub fn record(&self, i: usize) -> Result<CachedInterest> {
        let o = self.offset(i);
        CachedInterest::decode(&self.bytes[o..o + self.dims.record_len()], self.dims, o as u64)
    }

    /// Binary search by user id; `Ok(None)` for an unknown user.
    pub fn lookup(&self, user_id: u64) -> Result<Option<CachedInterest>> {
        let (mut lo, mut hi) = (0, self.count);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            match self.user_at(mid).cmp(&user_id) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return self.record(mid).map(Some),
            }
        }
        Ok(None)
    }
}
