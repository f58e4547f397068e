//! Frozen item text-embedding matrices and the `.emb` file format.
//!
//! Layout, little-endian:
//!
//! ```text
//! "IDAE" | u32 version = 1 | u32 item_count | u32 dim
//! item_count × (u16 token_len, token bytes)
//! item_count × dim × f32, row-major in token order
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"IDAE";
pub const EMB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddingMatrix {
    tokens: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl ItemEmbeddingMatrix {
    pub fn new(tokens: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || tokens.is_empty() {
            return Err(Error::Shape("embedding matrix needs at least one row and column".into()));
        }
        if data.len() != tokens.len() * dim {
            return Err(Error::Shape(format!(
                "{} tokens × {dim} dims needs {} values, got {}",
                tokens.len(),
                tokens.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::Argument(format!("duplicate token {dup:?}")));
        }
        Ok(ItemEmbeddingMatrix { tokens, dim, data })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// SHA-256 over tokens and the raw bits of every value, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u32).to_le_bytes());
            h.update(t.as_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for t in &self.tokens {
            let len = u16::try_from(t.len())
                .map_err(|_| Error::Argument(format!("token of {} bytes exceeds u16", t.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != EMB_MAGIC {
            return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
        }
        let version = r.u32("version")?;
        if version != EMB_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("item count")? as usize;
        let dim = r.u32("dim")? as usize;
        let mut tokens = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("token length")? as usize;
            let raw = r.take(len, "token bytes")?;
            let tok = std::str::from_utf8(raw)
                .map_err(|_| Error::Format { offset: at as u64, message: "token is not UTF-8".into() })?;
            tokens.push(tok.to_string());
        }
        let need = count * dim * 4;
        let raw = r.take(need, "matrix values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, message: "trailing bytes".into() });
        }
        ItemEmbeddingMatrix::new(tokens, dim, data)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, message: format!("truncated while reading {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

pub fn write_emb(m: &ItemEmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, m.to_bytes()?)?;
    Ok(())
}

pub fn read_emb(path: impl AsRef<Path>) -> Result<ItemEmbeddingMatrix> {
    ItemEmbeddingMatrix::from_bytes(&fs::read(path)?)
}

/// Reorders rows so row `i` belongs to vocabulary item `i`. Rows for tokens
/// outside the vocabulary are dropped.
pub fn align_to_vocab(m: &ItemEmbeddingMatrix, vocab: &Vocab) -> Result<ItemEmbeddingMatrix> {
    let position: std::collections::HashMap<&str, usize> =
        m.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let missing: Vec<&String> = vocab.tokens().iter().filter(|t| !position.contains_key(t.as_str())).collect();
    if !missing.is_empty() {
        return Err(Error::Coverage {
            count: missing.len(),
            shown: missing.iter().take(10).map(|s| s.to_string()).collect(),
        });
    }
    let mut data = Vec::with_capacity(vocab.len() * m.dim);
    for t in vocab.tokens() {
        data.extend_from_slice(m.row(position[t.as_str()]));
    }
    ItemEmbeddingMatrix::new(vocab.tokens().to_vec(), m.dim, data)
}

/// Where pseudo-embedding rows come from.
#[derive(Clone, Copy, Debug)]
pub enum PseudoSource<'a> {
    /// Latent attributes (one row per token), projected to the target width.
    Attributes { rows: &'a [Vec<f64>], noise: f64 },
    /// Rows derived from the token bytes alone.
    Hash,
}

fn unit(mut v: Vec<f64>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v.into_iter().map(|x| x as f32).collect()
}

/// Deterministic stand-in for language-model item vectors; rows are unit norm.
pub fn pseudo_embed(tokens: &[String], source: PseudoSource<'_>, dim: usize, seed: u64) -> Result<ItemEmbeddingMatrix> {
    let mut data = Vec::with_capacity(tokens.len() * dim);
    match source {
        PseudoSource::Attributes { rows, noise } => {
            if rows.len() != tokens.len() {
                return Err(Error::Shape(format!("{} attribute rows for {} tokens", rows.len(), tokens.len())));
            }
            let k = rows.first().map_or(0, Vec::len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (k.max(1) as f64).sqrt();
            let projection: Vec<f64> = (0..k * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            for (idx, a) in rows.iter().enumerate() {
                if a.len() != k {
                    return Err(Error::Shape("ragged attribute rows".into()));
                }
                let mut row = vec![0.0; dim];
                for (p, &av) in a.iter().enumerate() {
                    for (o, &w) in row.iter_mut().zip(&projection[p * dim..(p + 1) * dim]) {
                        *o += av * w;
                    }
                }
                if noise > 0.0 {
                    let mut nrng =
                        ChaCha8Rng::seed_from_u64(seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    for o in row.iter_mut() {
                        *o += noise * nrng.sample::<f64, _>(StandardNormal);
                    }
                }
                data.extend(unit(row));
            }
        }
        PseudoSource::Hash => {
            for t in tokens {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(t.as_bytes());
                let digest: [u8; 32] = h.finalize().into();
                let mut rng = ChaCha8Rng::from_seed(digest);
                let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                data.extend(unit(row));
            }
        }
    }
    ItemEmbeddingMatrix::new(tokens.to_vec(), dim, data)
}
