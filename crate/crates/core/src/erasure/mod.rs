//! Systematic Reed-Solomon erasure coding over GF(2^8).
//!
//! The generator matrix is the identity stacked on an `M x K` Vandermonde block with
//! `P[m][j] = (m + 1)^j`. Any `K` surviving shards are decoded by Gauss-Jordan
//! inversion of the matching `K x K` rows of the generator.
//!
//! # Shard file layout
//!
//! Every shard serializes as a fixed 60-byte header followed by the payload:
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 4    | magic `b"MGRS"`                          |
//! | 4      | 1    | format version (`1`)                     |
//! | 5      | 1    | `K`                                      |
//! | 6      | 1    | `M`                                      |
//! | 7      | 1    | shard index, `0..K+M`                    |
//! | 8      | 1    | kind: `0` data, `1` parity               |
//! | 9      | 3    | reserved, zero                           |
//! | 12     | 8    | original blob length, u64 little-endian  |
//! | 20     | 8    | payload length, u64 little-endian        |
//! | 28     | 32   | blob id: SHA-256 of the original blob    |

mod gf256;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use gf256::{gf_inv, gf_mul, Gf256, POLYNOMIAL};

pub const SHARD_MAGIC: [u8; 4] = *b"MGRS";
pub const SHARD_FORMAT_VERSION: u8 = 1;
pub const SHARD_HEADER_LEN: usize = 60;

/// Upper bound on square minors examined while validating parameters.
const MINOR_CHECK_BUDGET: u64 = 5_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ErasureError {
    #[error("invalid coding parameters K={k}, M={m}: {reason}")]
    InvalidParams { k: usize, m: usize, reason: String },
    #[error("cannot encode an empty blob")]
    EmptyBlob,
    #[error("unrecoverable: {available} distinct shards available, {needed} needed")]
    NotEnoughShards { available: usize, needed: usize },
    #[error("inconsistent shards: {0}")]
    Inconsistent(String),
    #[error("malformed shard header: {0}")]
    Malformed(String),
    #[error("decoded blob does not match its blob id")]
    DigestMismatch,
    #[error("matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingParams {
    k: usize,
    m: usize,
}

impl Default for CodingParams {
    fn default() -> Self {
        Self { k: 4, m: 2 }
    }
}

impl CodingParams {
    /// Validates `K, M >= 1`, `K + M <= 255`, and that every square submatrix of the
    /// parity block is nonsingular, so every `K`-subset of shards decodes.
    pub fn new(k: usize, m: usize) -> Result<Self, ErasureError> {
        let invalid = |reason: String| ErasureError::InvalidParams { k, m, reason };
        if k == 0 || m == 0 {
            return Err(invalid("K and M must be positive".into()));
        }
        if k + m > 255 {
            return Err(invalid("K + M must not exceed 255".into()));
        }
        let p = Self { k, m };
        let parity = p.parity_matrix();
        let mut budget = MINOR_CHECK_BUDGET;
        for size in 1..=k.min(m) {
            for rows in combinations(m, size) {
                for cols in combinations(k, size) {
                    if budget == 0 {
                        return Err(invalid(
                            "too many submatrices to verify decodability".into(),
                        ));
                    }
                    budget -= 1;
                    let minor: Vec<Vec<Gf256>> = rows
                        .iter()
                        .map(|&r| cols.iter().map(|&c| parity[r][c]).collect())
                        .collect();
                    if determinant(minor) == Gf256::ZERO {
                        return Err(invalid(format!(
                            "parity rows {rows:?} x data columns {cols:?} are singular"
                        )));
                    }
                }
            }
        }
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn total(&self) -> usize {
        self.k + self.m
    }

    pub fn parity_matrix(&self) -> Vec<Vec<Gf256>> {
        vandermonde_parity_matrix(self.k, self.m)
    }

    /// Row `index` of the `(K + M) x K` generator.
    fn generator_row(&self, index: usize) -> Vec<Gf256> {
        if index < self.k {
            (0..self.k)
                .map(|j| if j == index { Gf256::ONE } else { Gf256::ZERO })
                .collect()
        } else {
            let base = Gf256((index - self.k + 1) as u8);
            (0..self.k).map(|j| base.pow(j as u32)).collect()
        }
    }
}

/// `P[m][j] = (m + 1)^j` in GF(2^8).
pub fn vandermonde_parity_matrix(k: usize, m: usize) -> Vec<Vec<Gf256>> {
    (0..m)
        .map(|row| {
            let base = Gf256((row + 1) as u8);
            (0..k).map(|j| base.pow(j as u32)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardKind {
    Data,
    Parity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub index: usize,
    pub kind: ShardKind,
    pub params: CodingParams,
    pub original_len: u64,
    pub blob_id: [u8; 32],
    pub bytes: Vec<u8>,
}

impl Shard {
    pub fn blob_id_hex(&self) -> String {
        hex::encode(self.blob_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SHARD_HEADER_LEN + self.bytes.len());
        out.extend_from_slice(&SHARD_MAGIC);
        out.push(SHARD_FORMAT_VERSION);
        out.push(self.params.k as u8);
        out.push(self.params.m as u8);
        out.push(self.index as u8);
        out.push(match self.kind {
            ShardKind::Data => 0,
            ShardKind::Parity => 1,
        });
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&self.original_len.to_le_bytes());
        out.extend_from_slice(&(self.bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.blob_id);
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, ErasureError> {
        let bad = |s: &str| ErasureError::Malformed(s.to_string());
        if raw.len() < SHARD_HEADER_LEN {
            return Err(bad("shorter than header"));
        }
        if raw[0..4] != SHARD_MAGIC {
            return Err(bad("bad magic"));
        }
        if raw[4] != SHARD_FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let params = CodingParams::new(raw[5] as usize, raw[6] as usize)
            .map_err(|e| ErasureError::Malformed(e.to_string()))?;
        let index = raw[7] as usize;
        let kind = match raw[8] {
            0 => ShardKind::Data,
            1 => ShardKind::Parity,
            _ => return Err(bad("unknown shard kind")),
        };
        if index >= params.total() || (index < params.k) != (kind == ShardKind::Data) {
            return Err(bad("index and kind disagree with K, M"));
        }
        if raw[9..12] != [0, 0, 0] {
            return Err(bad("reserved bytes are not zero"));
        }
        let original_len = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes"));
        let payload_len = u64::from_le_bytes(raw[20..28].try_into().expect("8 bytes"));
        let blob_id: [u8; 32] = raw[28..60].try_into().expect("32 bytes");
        let payload = &raw[SHARD_HEADER_LEN..];
        if payload.len() as u64 != payload_len {
            return Err(bad("payload length does not match header"));
        }
        Ok(Self {
            index,
            kind,
            params,
            original_len,
            blob_id,
            bytes: payload.to_vec(),
        })
    }
}

pub fn blob_id(blob: &[u8]) -> [u8; 32] {
    Sha256::digest(blob).into()
}

pub fn rs_encode(blob: &[u8], params: CodingParams) -> Result<Vec<Shard>, ErasureError> {
    if blob.is_empty() {
        return Err(ErasureError::EmptyBlob);
    }
    let k = params.k;
    let shard_len = blob.len().div_ceil(k);
    let id = blob_id(blob);
    let mut data: Vec<Vec<u8>> = (0..k)
        .map(|j| {
            let start = (j * shard_len).min(blob.len());
            let end = ((j + 1) * shard_len).min(blob.len());
            let mut s = blob[start..end].to_vec();
            s.resize(shard_len, 0);
            s
        })
        .collect();
    let parity = params.parity_matrix();
    let mut parity_shards = Vec::with_capacity(params.m);
    for row in &parity {
        let mut out = vec![0u8; shard_len];
        for (coef, src) in row.iter().zip(&data) {
            mul_add_into(&mut out, *coef, src);
        }
        parity_shards.push(out);
    }
    let shard = |index: usize, kind: ShardKind, bytes: Vec<u8>| Shard {
        index,
        kind,
        params,
        original_len: blob.len() as u64,
        blob_id: id,
        bytes,
    };
    let mut shards: Vec<Shard> = data
        .drain(..)
        .enumerate()
        .map(|(i, b)| shard(i, ShardKind::Data, b))
        .collect();
    shards.extend(
        parity_shards
            .into_iter()
            .enumerate()
            .map(|(i, b)| shard(k + i, ShardKind::Parity, b)),
    );
    Ok(shards)
}

/// `out[b] += coef * src[b]` for every byte position.
fn mul_add_into(out: &mut [u8], coef: Gf256, src: &[u8]) {
    if coef == Gf256::ZERO {
        return;
    }
    if coef == Gf256::ONE {
        for (o, s) in out.iter_mut().zip(src) {
            *o ^= *s;
        }
        return;
    }
    let mut table = [0u8; 256];
    for (x, t) in table.iter_mut().enumerate() {
        *t = (coef * Gf256(x as u8)).0;
    }
    for (o, s) in out.iter_mut().zip(src) {
        *o ^= table[*s as usize];
    }
}

/// Reconstructs the original blob from any `K` distinct shards of it.
pub fn rs_decode(available: &[Shard]) -> Result<Vec<u8>, ErasureError> {
    let first = available.first().ok_or(ErasureError::NotEnoughShards {
        available: 0,
        needed: 1,
    })?;
    let params = first.params;
    let k = params.k;
    for s in available {
        if s.params != params {
            return Err(ErasureError::Inconsistent("coding parameters differ".into()));
        }
        if s.blob_id != first.blob_id || s.original_len != first.original_len {
            return Err(ErasureError::Inconsistent("shards belong to different blobs".into()));
        }
        if s.bytes.len() != first.bytes.len() {
            return Err(ErasureError::Inconsistent("shard lengths differ".into()));
        }
        if s.index >= params.total() {
            return Err(ErasureError::Inconsistent(format!("shard index {} out of range", s.index)));
        }
    }
    let mut by_index: Vec<&Shard> = available.iter().collect();
    by_index.sort_by_key(|s| s.index);
    by_index.dedup_by_key(|s| s.index);
    if by_index.len() < k {
        return Err(ErasureError::NotEnoughShards {
            available: by_index.len(),
            needed: k,
        });
    }
    let chosen = &by_index[..k];
    let shard_len = first.bytes.len();
    let original_len = usize::try_from(first.original_len)
        .map_err(|_| ErasureError::Inconsistent("length overflows usize".into()))?;
    if original_len > shard_len * k || original_len == 0 {
        return Err(ErasureError::Inconsistent("original length disagrees with shard size".into()));
    }

    let data: Vec<Vec<u8>> = if chosen.iter().all(|s| s.index < k) {
        chosen.iter().map(|s| s.bytes.clone()).collect()
    } else {
        let sub: Vec<Vec<Gf256>> = chosen.iter().map(|s| params.generator_row(s.index)).collect();
        let inv = invert(sub)?;
        inv.iter()
            .map(|row| {
                let mut out = vec![0u8; shard_len];
                for (coef, s) in row.iter().zip(chosen) {
                    mul_add_into(&mut out, *coef, &s.bytes);
                }
                out
            })
            .collect()
    };
    let mut blob: Vec<u8> = data.into_iter().flatten().collect();
    blob.truncate(original_len);
    if blob_id(&blob) != first.blob_id {
        return Err(ErasureError::DigestMismatch);
    }
    Ok(blob)
}

/// Gauss-Jordan inversion of a square matrix over GF(2^8).
pub fn invert(mut a: Vec<Vec<Gf256>>) -> Result<Vec<Vec<Gf256>>, ErasureError> {
    let n = a.len();
    let mut inv: Vec<Vec<Gf256>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { Gf256::ONE } else { Gf256::ZERO })
                .collect()
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| a[r][col] != Gf256::ZERO)
            .ok_or(ErasureError::Singular)?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let scale = a[col][col].inv().expect("pivot is nonzero");
        for j in 0..n {
            a[col][j] *= scale;
            inv[col][j] *= scale;
        }
        for r in 0..n {
            if r != col && a[r][col] != Gf256::ZERO {
                let f = a[r][col];
                for j in 0..n {
                    let (ac, ic) = (a[col][j], inv[col][j]);
                    a[r][j] += f * ac;
                    inv[r][j] += f * ic;
                }
            }
        }
    }
    Ok(inv)
}

fn determinant(mut a: Vec<Vec<Gf256>>) -> Gf256 {
    let n = a.len();
    let mut det = Gf256::ONE;
    for col in 0..n {
        let Some(pivot) = (col..n).find(|&r| a[r][col] != Gf256::ZERO) else {
            return Gf256::ZERO;
        };
        // Row swaps flip the sign, which is a no-op in characteristic 2.
        a.swap(col, pivot);
        let p = a[col][col];
        det *= p;
        let p_inv = p.inv().expect("pivot is nonzero");
        for r in col + 1..n {
            let f = a[r][col] * p_inv;
            if f != Gf256::ZERO {
                let (top, rest) = a.split_at_mut(r);
                for (x, v) in rest[0][col..].iter_mut().zip(&top[col][col..]) {
                    *x += f * *v;
                }
            }
        }
    }
    det
}

/// All `r`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < r - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    rec(0, n, r, &mut cur, &mut out);
    out
}
