//! Semantic-ID tokenization: residual k-means codebooks, per-item token
//! tuples with layer-offset IDs, and collision-breaking dedup tokens.
//!
//! Vocabulary layout for `m` layers of `c` clusters and dedup range `d_max`:
//! semantic tokens `[0, m·c)` (layer `j` owns `[j·c, (j+1)·c)`), dedup tokens
//! `[m·c, m·c + d_max)`, then the mask token and the pad token.

mod kmeans;

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, nearest, KMeans};

use crate::data::EmbeddingTable;
use crate::{rng, Error, Matrix, Result, Scalar};

const CATALOG_MAGIC: &[u8; 8] = b"SIDCAT\0\x01";

/// `m` layers of `c` centroids each.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack<T> {
    pub m: usize,
    pub c: usize,
    pub layers: Vec<Matrix<T>>,
    /// Mean squared residual norm after each layer.
    pub residual_mse: Vec<f64>,
}

impl<T: Scalar> CodebookStack<T> {
    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    /// All centroids stacked into one `(m·c) × dim` table, layer-major.
    pub fn to_table(&self) -> EmbeddingTable<T> {
        let mut data = Vec::with_capacity(self.m * self.c * self.dim());
        for l in &self.layers {
            data.extend_from_slice(l.data());
        }
        EmbeddingTable {
            vectors: Matrix::from_vec(self.m * self.c, self.dim(), data),
        }
    }

    pub fn from_table(table: &EmbeddingTable<T>, m: usize) -> Result<Self> {
        let n = table.item_count();
        if m == 0 || !n.is_multiple_of(m) {
            return Err(Error::Format(format!("{n} centroids do not split into {m} layers")));
        }
        let c = n / m;
        let dim = table.dim();
        let layers = (0..m)
            .map(|j| Matrix::from_vec(c, dim, table.vectors.data()[j * c * dim..(j + 1) * c * dim].to_vec()))
            .collect();
        Ok(Self {
            m,
            c,
            layers,
            residual_mse: Vec::new(),
        })
    }
}

/// Fits `m` layers of k-means, each on the residuals left by the previous.
pub fn fit_residual_kmeans<T: Scalar>(
    emb: &EmbeddingTable<T>,
    m: usize,
    c: usize,
    iters: usize,
    seed: u64,
) -> Result<CodebookStack<T>> {
    if m == 0 || c == 0 {
        return Err(Error::invalid("m and c must be positive"));
    }
    if emb.item_count() < c {
        return Err(Error::invalid(format!(
            "{} items cannot fill {c} clusters",
            emb.item_count()
        )));
    }
    if !emb.vectors.is_finite() {
        return Err(Error::invalid("embeddings contain non-finite values"));
    }
    let n = emb.item_count();
    let mut residual = emb.vectors.clone();
    let mut layers = Vec::with_capacity(m);
    let mut residual_mse = Vec::with_capacity(m);
    for j in 0..m {
        let km = kmeans(&residual, c, iters, &mut rng::stream(seed, &[0x4B4D, j as u64]));
        for (i, &a) in km.assignment.iter().enumerate() {
            let centre = km.centroids.row(a).to_vec();
            for (r, x) in residual.row_mut(i).iter_mut().zip(centre) {
                *r -= x;
            }
        }
        log::debug!("layer {j}: inertia {:.6} after {} iterations", km.inertia, km.iterations);
        residual_mse.push(km.inertia / n as f64);
        layers.push(km.centroids);
    }
    Ok(CodebookStack {
        m,
        c,
        layers,
        residual_mse,
    })
}

/// Self-describing header of a catalog file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CatalogHeader {
    m: usize,
    c: usize,
    d_max: usize,
    m_tot: usize,
    item_count: usize,
    semantic_range: [u32; 2],
    dedup_range: [u32; 2],
    mask_token: u32,
    pad_token: u32,
}

/// Per-item token tuples plus the reverse index.
#[derive(Debug, Clone)]
pub struct SidCatalog {
    m: usize,
    c: usize,
    d_max: usize,
    tokens: Vec<u32>,
    reverse: HashMap<Vec<u32>, u32>,
}

impl PartialEq for SidCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m && self.c == other.c && self.d_max == other.d_max && self.tokens == other.tokens
    }
}

impl SidCatalog {
    /// Builds a catalog from flat `item_count × (m+1)` tuples and checks
    /// range and uniqueness invariants.
    pub fn new(m: usize, c: usize, d_max: usize, tokens: Vec<u32>) -> Result<Self> {
        let m_tot = m + 1;
        if m == 0 || c == 0 || d_max == 0 || !tokens.len().is_multiple_of(m_tot) {
            return Err(Error::Format("inconsistent catalog shape".into()));
        }
        let mut cat = Self {
            m,
            c,
            d_max,
            tokens,
            reverse: HashMap::new(),
        };
        let mut reverse = HashMap::with_capacity(cat.item_count());
        for item in 0..cat.item_count() {
            let tuple = cat.tuple(item as u32);
            for (j, &t) in tuple.iter().enumerate() {
                if !cat.slot_range(j).contains(&t) {
                    return Err(Error::Format(format!("item {item}: token {t} outside slot {j} range")));
                }
            }
            if reverse.insert(tuple.to_vec(), item as u32).is_some() {
                return Err(Error::Format(format!("item {item}: duplicate tuple {tuple:?}")));
            }
        }
        cat.reverse = reverse;
        Ok(cat)
    }

    /// Appends dedup tokens to semantic tuples (absolute token IDs); items
    /// sharing a semantic tuple get 0, 1, 2, … in item order. `d_max`
    /// defaults to the largest collision group.
    pub fn from_semantic(m: usize, c: usize, semantic: &[Vec<u32>], d_max: Option<usize>) -> Result<Self> {
        let mut seen: HashMap<&[u32], usize> = HashMap::new();
        let mut dedup = Vec::with_capacity(semantic.len());
        for s in semantic {
            if s.len() != m {
                return Err(Error::invalid("semantic tuple length differs from m"));
            }
            let k = seen.entry(s.as_slice()).or_insert(0);
            dedup.push(*k);
            *k += 1;
        }
        let largest = seen.values().copied().max().unwrap_or(1);
        let d_max = d_max.unwrap_or(largest);
        if largest > d_max {
            return Err(Error::invalid(format!("collision group of {largest} exceeds d_max {d_max}")));
        }
        let base = (m * c) as u32;
        let mut tokens = Vec::with_capacity(semantic.len() * (m + 1));
        for (s, d) in semantic.iter().zip(dedup) {
            tokens.extend_from_slice(s);
            tokens.push(base + d as u32);
        }
        Self::new(m, c, d_max, tokens)
    }

    /// One token per item: the item's own ID, plus a constant dedup slot.
    pub fn item_ids(item_count: usize) -> Result<Self> {
        let semantic: Vec<Vec<u32>> = (0..item_count as u32).map(|i| vec![i]).collect();
        Self::from_semantic(1, item_count, &semantic, Some(1))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    /// Tuple length including the dedup slot.
    pub fn m_tot(&self) -> usize {
        self.m + 1
    }

    pub fn item_count(&self) -> usize {
        self.tokens.len() / self.m_tot()
    }

    /// Tokens the denoiser can predict: semantic plus dedup.
    pub fn output_vocab(&self) -> usize {
        self.m * self.c + self.d_max
    }

    pub fn mask_token(&self) -> u32 {
        self.output_vocab() as u32
    }

    pub fn pad_token(&self) -> u32 {
        self.output_vocab() as u32 + 1
    }

    /// Input vocabulary including mask and pad.
    pub fn vocab_size(&self) -> usize {
        self.output_vocab() + 2
    }

    /// Legal token IDs at tuple position `j`.
    pub fn slot_range(&self, j: usize) -> Range<u32> {
        let c = self.c as u32;
        if j < self.m {
            j as u32 * c..(j as u32 + 1) * c
        } else {
            let base = (self.m * self.c) as u32;
            base..base + self.d_max as u32
        }
    }

    pub fn tuple(&self, item: u32) -> &[u32] {
        let k = self.m_tot();
        &self.tokens[item as usize * k..(item as usize + 1) * k]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn lookup(&self, tuple: &[u32]) -> Option<u32> {
        self.reverse.get(tuple).copied()
    }

    /// Flattened token sequence for a list of items.
    pub fn encode(&self, items: &[u32]) -> Vec<u32> {
        items.iter().flat_map(|&i| self.tuple(i).iter().copied()).collect()
    }

    /// Distinct tokens used at each tuple position.
    pub fn slot_usage(&self) -> Vec<usize> {
        (0..self.m_tot())
            .map(|j| {
                let mut used: Vec<u32> = (0..self.item_count()).map(|i| self.tuple(i as u32)[j]).collect();
                used.sort_unstable();
                used.dedup();
                used.len()
            })
            .collect()
    }

    /// Items whose semantic tuple collides with an earlier item.
    pub fn collisions(&self) -> usize {
        let base = (self.m * self.c) as u32;
        (0..self.item_count()).filter(|&i| self.tuple(i as u32)[self.m] != base).count()
    }

    fn header(&self) -> CatalogHeader {
        let sem = (self.m * self.c) as u32;
        CatalogHeader {
            m: self.m,
            c: self.c,
            d_max: self.d_max,
            m_tot: self.m_tot(),
            item_count: self.item_count(),
            semantic_range: [0, sem],
            dedup_range: [sem, sem + self.d_max as u32],
            mask_token: self.mask_token(),
            pad_token: self.pad_token(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.tokens.len());
        out.extend_from_slice(CATALOG_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("catalog: {m}"));
        if bytes.len() < 12 || &bytes[..8] != CATALOG_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12 + hlen..).ok_or_else(|| bad("truncated header"))?;
        let header: CatalogHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
        if body.len() != 4 * header.item_count * header.m_tot || header.m_tot != header.m + 1 {
            return Err(bad("token matrix size disagrees with header"));
        }
        let tokens = body
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let cat = Self::new(header.m, header.c, header.d_max, tokens)?;
        if cat.header() != header {
            return Err(bad("inconsistent vocabulary layout"));
        }
        Ok(cat)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Nearest-centroid walk through the layers for one vector.
pub fn encode_vector<T: Scalar>(cb: &CodebookStack<T>, x: &[T]) -> Vec<u32> {
    let mut residual = x.to_vec();
    let mut out = Vec::with_capacity(cb.m);
    for (j, layer) in cb.layers.iter().enumerate() {
        let (k, _) = nearest(layer, &residual);
        for (r, &v) in residual.iter_mut().zip(layer.row(k)) {
            *r -= v;
        }
        out.push((j * cb.c + k) as u32);
    }
    out
}

pub fn assign_sids<T: Scalar>(emb: &EmbeddingTable<T>, cb: &CodebookStack<T>) -> Result<SidCatalog> {
    if emb.dim() != cb.dim() {
        return Err(Error::invalid(format!(
            "embedding dim {} differs from codebook dim {}",
            emb.dim(),
            cb.dim()
        )));
    }
    let semantic: Vec<Vec<u32>> = (0..emb.item_count()).map(|i| encode_vector(cb, emb.row(i))).collect();
    SidCatalog::from_semantic(cb.m, cb.c, &semantic, None)
}

/// Replaces semantic tokens with uniform draws per layer, keeping the
/// vocabulary layout. Draws that would overflow the dedup range are redrawn.
pub fn randomize_sids(cat: &SidCatalog, seed: u64) -> Result<SidCatalog> {
    let (m, c) = (cat.m(), cat.c());
    let capacity = (c as f64).powi(m as i32) * cat.d_max() as f64;
    if capacity < cat.item_count() as f64 {
        return Err(Error::invalid("catalog too large for its tuple space"));
    }
    let mut rng = rng::stream(seed, &[0x5241_4E44]);
    let draw = |rng: &mut rng::Rng| -> Vec<u32> { (0..m).map(|j| (j * c + rng.random_range(0..c)) as u32).collect() };
    let mut semantic: Vec<Vec<u32>> = (0..cat.item_count()).map(|_| draw(&mut rng)).collect();
    loop {
        let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut overflow = Vec::new();
        for (i, s) in semantic.iter().enumerate() {
            let k = counts.entry(s.clone()).or_insert(0);
            *k += 1;
            if *k > cat.d_max() {
                overflow.push(i);
            }
        }
        if overflow.is_empty() {
            break;
        }
        for i in overflow {
            semantic[i] = draw(&mut rng);
        }
    }
    SidCatalog::from_semantic(m, c, &semantic, Some(cat.d_max()))
}
