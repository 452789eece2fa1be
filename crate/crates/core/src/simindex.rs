//! Identity-labeled embedding gallery with exact nearest-neighbor search
//! and CMC / retrieval-mAP evaluation.
//!
//! Search is exact flat scan: desk-scale galleries need no approximation
//! and the results stay deterministic. After loading (or once construction
//! is done) a gallery is shared immutably across workers.

use std::collections::BinaryHeap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::Embedding;

const FGAL_MAGIC: &[u8; 4] = b"FGAL";
const FGAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("dimension mismatch: gallery is {expected}, vector is {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector is not unit-normalized (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query identity {0} not present in gallery")]
    UnknownIdentity(u64),
    #[error("bad gallery file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    L2,
    Cosine,
}

impl DistanceMetric {
    fn code(self) -> u8 {
        match self {
            DistanceMetric::L2 => 0,
            DistanceMetric::Cosine => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DistanceMetric::L2),
            1 => Some(DistanceMetric::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub identity_id: u64,
    pub label: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub identity_id: u64,
    pub label: String,
    pub distance: f64,
    pub gallery_index: usize,
}

/// A query against the gallery. `exclude_index` removes the query's own
/// gallery sample from the ranking (leave-one-out protocol).
#[derive(Debug, Clone)]
pub struct GalleryQuery {
    pub identity_id: u64,
    pub embedding: Embedding,
    pub exclude_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingGallery {
    metric: DistanceMetric,
    dim: usize,
    entries: Vec<GalleryEntry>,
}

const NORM_TOLERANCE: f64 = 1e-6;

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

impl EmbeddingGallery {
    pub fn new(metric: DistanceMetric, dim: usize) -> Self {
        Self {
            metric,
            dim,
            entries: Vec::new(),
        }
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn label_of(&self, identity_id: u64) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.identity_id == identity_id)
            .map(|e| e.label.as_str())
    }

    /// Appends an entry, returning its gallery index.
    pub fn add(
        &mut self,
        identity_id: u64,
        label: impl Into<String>,
        embedding: &Embedding,
    ) -> Result<usize, GalleryError> {
        if embedding.dim() != self.dim {
            return Err(GalleryError::DimensionMismatch {
                expected: self.dim,
                got: embedding.dim(),
            });
        }
        if self.metric == DistanceMetric::Cosine {
            let norm = l2_norm(embedding.values());
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(GalleryError::NotNormalized { norm });
            }
        }
        self.entries.push(GalleryEntry {
            identity_id,
            label: label.into(),
            vector: embedding.values().to_vec(),
        });
        Ok(self.entries.len() - 1)
    }

    pub fn distance(&self, a: &[f32], b: &[f32]) -> f64 {
        match self.metric {
            DistanceMetric::L2 => {
                let mut sum = 0.0_f64;
                for (x, y) in a.iter().zip(b.iter()) {
                    let d = *x as f64 - *y as f64;
                    sum += d * d;
                }
                sum.sqrt()
            }
            DistanceMetric::Cosine => {
                let mut dot = 0.0_f64;
                for (x, y) in a.iter().zip(b.iter()) {
                    dot += *x as f64 * *y as f64;
                }
                1.0 - dot
            }
        }
    }

    /// Exact top-k by ascending distance, ties broken by lower gallery
    /// index. Returns all entries when `k` exceeds the gallery size.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>, GalleryError> {
        self.search_excluding(query, k, None)
    }

    pub fn search_excluding(
        &self,
        query: &Embedding,
        k: usize,
        exclude_index: Option<usize>,
    ) -> Result<Vec<SearchHit>, GalleryError> {
        if self.entries.is_empty() {
            return Err(GalleryError::EmptyGallery);
        }
        if query.dim() != self.dim {
            return Err(GalleryError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let k = k.max(1);
        // Max-heap of the current best k, keyed by (distance, index) so
        // that the worst kept candidate sits on top.
        let mut heap: BinaryHeap<(OrderedDist, usize)> = BinaryHeap::with_capacity(k + 1);
        for (idx, entry) in self.entries.iter().enumerate() {
            if exclude_index == Some(idx) {
                continue;
            }
            let d = self.distance(query.values(), &entry.vector);
            heap.push((OrderedDist(d), idx));
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut hits: Vec<(f64, usize)> =
            heap.into_iter().map(|(d, idx)| (d.0, idx)).collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(hits
            .into_iter()
            .map(|(distance, gallery_index)| {
                let entry = &self.entries[gallery_index];
                SearchHit {
                    identity_id: entry.identity_id,
                    label: entry.label.clone(),
                    distance,
                    gallery_index,
                }
            })
            .collect())
    }

    /// Full ranking of gallery indices by ascending distance.
    fn ranked_indices(&self, query: &GalleryQuery) -> Result<Vec<usize>, GalleryError> {
        if self.entries.is_empty() {
            return Err(GalleryError::EmptyGallery);
        }
        if query.embedding.dim() != self.dim {
            return Err(GalleryError::DimensionMismatch {
                expected: self.dim,
                got: query.embedding.dim(),
            });
        }
        let mut ranked: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(idx, _)| query.exclude_index != Some(*idx))
            .map(|(idx, e)| (self.distance(query.embedding.values(), &e.vector), idx))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(ranked.into_iter().map(|(_, idx)| idx).collect())
    }

    fn relevant_count(&self, query: &GalleryQuery) -> usize {
        self.entries
            .iter()
            .enumerate()
            .filter(|(idx, e)| {
                query.exclude_index != Some(*idx) && e.identity_id == query.identity_id
            })
            .count()
    }

    /// CMC rank-k accuracy for each requested k: the mean over queries of
    /// the indicator that the top-k ranked gallery samples contain the
    /// query identity.
    pub fn evaluate_cmc(
        &self,
        queries: &[GalleryQuery],
        k_values: &[usize],
    ) -> Result<Vec<(usize, f64)>, GalleryError> {
        let mut hits_at_k = vec![0usize; k_values.len()];
        for query in queries {
            if self.relevant_count(query) == 0 {
                return Err(GalleryError::UnknownIdentity(query.identity_id));
            }
            let ranked = self.ranked_indices(query)?;
            let first_match_rank = ranked
                .iter()
                .position(|&idx| self.entries[idx].identity_id == query.identity_id)
                .map(|pos| pos + 1)
                .unwrap_or(usize::MAX);
            for (slot, &k) in k_values.iter().enumerate() {
                if first_match_rank <= k {
                    hits_at_k[slot] += 1;
                }
            }
        }
        let n = queries.len().max(1) as f64;
        Ok(k_values
            .iter()
            .zip(hits_at_k.iter())
            .map(|(&k, &h)| (k, h as f64 / n))
            .collect())
    }

    /// Retrieval mAP: for each query, the average of precision at every
    /// rank where a same-identity item appears, divided by that query's
    /// relevant count; then the mean over queries.
    pub fn evaluate_retrieval_map(&self, queries: &[GalleryQuery]) -> Result<f64, GalleryError> {
        if queries.is_empty() {
            return Ok(0.0);
        }
        let mut sum_ap = 0.0;
        for query in queries {
            let relevant = self.relevant_count(query);
            if relevant == 0 {
                return Err(GalleryError::UnknownIdentity(query.identity_id));
            }
            let ranked = self.ranked_indices(query)?;
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (rank0, &idx) in ranked.iter().enumerate() {
                if self.entries[idx].identity_id == query.identity_id {
                    hits += 1;
                    ap += hits as f64 / (rank0 + 1) as f64;
                }
            }
            sum_ap += ap / relevant as f64;
        }
        Ok(sum_ap / queries.len() as f64)
    }

    /// Writes the binary gallery format: magic "FGAL", version u32,
    /// metric u8, dimension u32, count u64, then per entry identity u64,
    /// label (u16 length + UTF-8), and the f32 vector. Little-endian.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), GalleryError> {
        w.write_all(FGAL_MAGIC)?;
        w.write_all(&FGAL_VERSION.to_le_bytes())?;
        w.write_all(&[self.metric.code()])?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for entry in &self.entries {
            w.write_all(&entry.identity_id.to_le_bytes())?;
            let label = entry.label.as_bytes();
            if label.len() > u16::MAX as usize {
                return Err(GalleryError::Format("label longer than 65535 bytes".into()));
            }
            w.write_all(&(label.len() as u16).to_le_bytes())?;
            w.write_all(label)?;
            for &v in &entry.vector {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads and validates a gallery written by [`save`](Self::save).
    pub fn load<R: Read>(r: &mut R) -> Result<Self, GalleryError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FGAL_MAGIC {
            return Err(GalleryError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FGAL_VERSION {
            return Err(GalleryError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let mut metric_byte = [0u8; 1];
        r.read_exact(&mut metric_byte)?;
        let metric = DistanceMetric::from_code(metric_byte[0])
            .ok_or_else(|| GalleryError::Format(format!("bad metric code {}", metric_byte[0])))?;
        let dim = read_u32(r)? as usize;
        let count = read_u64(r)?;

        let mut gallery = EmbeddingGallery::new(metric, dim);
        for _ in 0..count {
            let identity_id = read_u64(r)?;
            let label_len = read_u16(r)? as usize;
            let mut label_bytes = vec![0u8; label_len];
            r.read_exact(&mut label_bytes)?;
            let label = String::from_utf8(label_bytes)
                .map_err(|_| GalleryError::Format("label is not UTF-8".into()))?;
            let mut vector = Vec::with_capacity(dim);
            let mut buf = [0u8; 4];
            for _ in 0..dim {
                r.read_exact(&mut buf)?;
                vector.push(f32::from_le_bytes(buf));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(GalleryError::Format("non-finite vector value".into()));
            }
            if metric == DistanceMetric::Cosine {
                let norm = l2_norm(&vector);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(GalleryError::NotNormalized { norm });
                }
            }
            gallery.entries.push(GalleryEntry {
                identity_id,
                label,
                vector,
            });
        }
        Ok(gallery)
    }
}

/// f64 wrapper ordered by total order; distances are validated finite.
#[derive(PartialEq)]
struct OrderedDist(f64);

impl Eq for OrderedDist {}

impl PartialOrd for OrderedDist {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedDist {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;

    fn raw(values: Vec<f32>) -> Embedding {
        Embedding::raw(values).unwrap()
    }

    fn unit(values: Vec<f32>) -> Embedding {
        Embedding::unit_normalized(values).unwrap()
    }

    fn random_gallery(
        metric: DistanceMetric,
        dim: usize,
        n: usize,
        identities: u64,
        seed: u64,
    ) -> EmbeddingGallery {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = EmbeddingGallery::new(metric, dim);
        for i in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e = match metric {
                DistanceMetric::L2 => raw(v),
                DistanceMetric::Cosine => unit(v),
            };
            g.add(i as u64 % identities, format!("id{}", i as u64 % identities), &e)
                .unwrap();
        }
        g
    }

    /// Full-sort oracle for top-k search.
    fn brute_force_topk(
        g: &EmbeddingGallery,
        query: &Embedding,
        k: usize,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = g
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (i, g.distance(query.values(), &e.vector)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k.min(all.len()));
        all
    }

    #[test]
    fn add_assigns_sequential_indices() {
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 2);
        assert_eq!(g.add(0, "a", &raw(vec![0.0, 1.0])).unwrap(), 0);
        assert_eq!(g.add(1, "b", &raw(vec![1.0, 0.0])).unwrap(), 1);
    }

    #[test]
    fn add_rejects_dimension_mismatch_and_unnormalized() {
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 128);
        let short = raw(vec![0.0; 64]);
        assert!(matches!(
            g.add(0, "a", &short),
            Err(GalleryError::DimensionMismatch { expected: 128, got: 64 })
        ));

        let mut cg = EmbeddingGallery::new(DistanceMetric::Cosine, 2);
        let long = raw(vec![2.0, 0.0]);
        assert!(matches!(
            cg.add(0, "a", &long),
            Err(GalleryError::NotNormalized { .. })
        ));
    }

    #[test]
    fn search_self_hit_and_geometry() {
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 2);
        g.add(0, "a", &raw(vec![1.0, 0.0])).unwrap();
        g.add(1, "b", &raw(vec![0.0, 1.0])).unwrap();
        let hits = g.search(&raw(vec![1.0, 0.0]), 1).unwrap();
        assert_eq!(hits[0].gallery_index, 0);
        assert_eq!(hits[0].distance, 0.0);

        let hits = g.search(&raw(vec![0.9, 0.1]), 1).unwrap();
        assert_eq!(hits[0].gallery_index, 0);
    }

    #[test]
    fn search_errors_and_overflow_k() {
        let g = EmbeddingGallery::new(DistanceMetric::L2, 2);
        assert!(matches!(
            g.search(&raw(vec![0.0, 0.0]), 1),
            Err(GalleryError::EmptyGallery)
        ));
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 2);
        g.add(0, "a", &raw(vec![0.0, 0.0])).unwrap();
        assert_eq!(g.search(&raw(vec![0.0, 0.0]), 10).unwrap().len(), 1);
    }

    #[test]
    fn search_matches_full_sort_oracle() {
        for seed in 0..10 {
            let g = random_gallery(DistanceMetric::L2, 16, 50, 10, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1000);
            let q = raw((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            for k in [1usize, 5, 17] {
                let hits = g.search(&q, k).unwrap();
                let oracle = brute_force_topk(&g, &q, k);
                assert_eq!(hits.len(), oracle.len());
                for (h, (oi, od)) in hits.iter().zip(oracle.iter()) {
                    assert_eq!(h.gallery_index, *oi);
                    assert_eq!(h.distance, *od);
                }
            }
        }
    }

    #[test]
    fn cosine_and_l2_agree_on_unit_vectors() {
        let dim = 8;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut l2 = EmbeddingGallery::new(DistanceMetric::L2, dim);
        let mut cos = EmbeddingGallery::new(DistanceMetric::Cosine, dim);
        for i in 0..40u64 {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e = unit(v);
            l2.add(i, "x", &e).unwrap();
            cos.add(i, "x", &e).unwrap();
        }
        let q = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let l2_order: Vec<usize> = l2
            .search(&q, 40)
            .unwrap()
            .into_iter()
            .map(|h| h.gallery_index)
            .collect();
        let cos_order: Vec<usize> = cos
            .search(&q, 40)
            .unwrap()
            .into_iter()
            .map(|h| h.gallery_index)
            .collect();
        assert_eq!(l2_order, cos_order);
    }

    #[test]
    fn cmc_single_query_rank1() {
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 2);
        g.add(7, "seven", &raw(vec![0.0, 0.0])).unwrap();
        g.add(8, "eight", &raw(vec![5.0, 5.0])).unwrap();
        let queries = vec![GalleryQuery {
            identity_id: 7,
            embedding: raw(vec![0.1, 0.0]),
            exclude_index: None,
        }];
        let cmc = g.evaluate_cmc(&queries, &[1]).unwrap();
        assert_eq!(cmc, vec![(1, 1.0)]);
    }

    #[test]
    fn cmc_mixed_ranks() {
        // Query 1 correct at rank 1; query 2 correct only at rank 3.
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 1);
        g.add(0, "a", &raw(vec![0.0])).unwrap();
        g.add(1, "b", &raw(vec![1.0])).unwrap();
        g.add(2, "c", &raw(vec![2.0])).unwrap();
        let queries = vec![
            GalleryQuery {
                identity_id: 0,
                embedding: raw(vec![0.1]),
                exclude_index: None,
            },
            GalleryQuery {
                identity_id: 2,
                embedding: raw(vec![0.2]),
                exclude_index: None,
            },
        ];
        let cmc = g.evaluate_cmc(&queries, &[1, 5]).unwrap();
        assert_eq!(cmc, vec![(1, 0.5), (5, 1.0)]);
    }

    #[test]
    fn cmc_unknown_identity() {
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 1);
        g.add(0, "a", &raw(vec![0.0])).unwrap();
        let queries = vec![GalleryQuery {
            identity_id: 42,
            embedding: raw(vec![0.0]),
            exclude_index: None,
        }];
        assert!(matches!(
            g.evaluate_cmc(&queries, &[1]),
            Err(GalleryError::UnknownIdentity(42))
        ));
    }

    #[test]
    fn retrieval_map_examples() {
        // Single query, one relevant item ranked first -> AP 1.
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 1);
        g.add(0, "a", &raw(vec![0.0])).unwrap();
        g.add(1, "b", &raw(vec![10.0])).unwrap();
        let q = vec![GalleryQuery {
            identity_id: 0,
            embedding: raw(vec![0.1]),
            exclude_index: None,
        }];
        assert_eq!(g.evaluate_retrieval_map(&q).unwrap(), 1.0);

        // Relevant at ranks 1 and 3 of 4 -> AP = (1/1 + 2/3) / 2.
        let mut g = EmbeddingGallery::new(DistanceMetric::L2, 1);
        g.add(0, "a", &raw(vec![0.0])).unwrap(); // rank 1
        g.add(1, "b", &raw(vec![1.0])).unwrap(); // rank 2
        g.add(0, "a", &raw(vec![2.0])).unwrap(); // rank 3
        g.add(1, "b", &raw(vec![3.0])).unwrap(); // rank 4
        let q = vec![GalleryQuery {
            identity_id: 0,
            embedding: raw(vec![-0.5]),
            exclude_index: None,
        }];
        let map = g.evaluate_retrieval_map(&q).unwrap();
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    /// Independent CMC/mAP reimplementation over explicit ranked lists.
    fn oracle_cmc_map(
        g: &EmbeddingGallery,
        queries: &[GalleryQuery],
        k_values: &[usize],
    ) -> (Vec<f64>, f64) {
        let mut cmc = vec![0.0; k_values.len()];
        let mut sum_ap = 0.0;
        for q in queries {
            let mut dists: Vec<(f64, usize)> = g
                .entries()
                .iter()
                .enumerate()
                .filter(|(i, _)| q.exclude_index != Some(*i))
                .map(|(i, e)| {
                    let mut s = 0.0f64;
                    for (a, b) in q.embedding.values().iter().zip(e.vector.iter()) {
                        let d = *a as f64 - *b as f64;
                        s += d * d;
                    }
                    (s.sqrt(), i)
                })
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            let rel: Vec<bool> = dists
                .iter()
                .map(|&(_, i)| g.entries()[i].identity_id == q.identity_id)
                .collect();
            for (slot, &k) in k_values.iter().enumerate() {
                if rel.iter().take(k).any(|&r| r) {
                    cmc[slot] += 1.0;
                }
            }
            let total_rel = rel.iter().filter(|&&r| r).count();
            let mut hits = 0;
            let mut ap = 0.0;
            for (rank0, &r) in rel.iter().enumerate() {
                if r {
                    hits += 1;
                    ap += hits as f64 / (rank0 + 1) as f64;
                }
            }
            sum_ap += ap / total_rel as f64;
        }
        let n = queries.len() as f64;
        (cmc.into_iter().map(|c| c / n).collect(), sum_ap / n)
    }

    #[test]
    fn cmc_and_map_match_brute_force_oracle() {
        for seed in 0..20u64 {
            let g = random_gallery(DistanceMetric::L2, 4, 20, 4, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 500);
            let queries: Vec<GalleryQuery> = (0..4)
                .map(|id| GalleryQuery {
                    identity_id: id,
                    embedding: raw((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                    exclude_index: None,
                })
                .collect();
            let ks = [1usize, 3, 5];
            let cmc = g.evaluate_cmc(&queries, &ks).unwrap();
            let map = g.evaluate_retrieval_map(&queries).unwrap();
            let (oracle_cmc, oracle_map) = oracle_cmc_map(&g, &queries, &ks);
            for ((_, v), o) in cmc.iter().zip(oracle_cmc.iter()) {
                assert_eq!(v, o);
            }
            assert_eq!(map, oracle_map);
        }
    }

    #[test]
    fn fgal_round_trip_bit_exact() {
        let g = random_gallery(DistanceMetric::Cosine, 8, 12, 3, 42);
        let mut buf = Vec::new();
        g.save(&mut buf).unwrap();
        let loaded = EmbeddingGallery::load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.metric(), g.metric());
        assert_eq!(loaded.dim(), g.dim());
        assert_eq!(loaded.entries(), g.entries());
        let mut buf2 = Vec::new();
        loaded.save(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn fgal_rejects_corruption() {
        let g = random_gallery(DistanceMetric::L2, 4, 3, 3, 1);
        let mut buf = Vec::new();
        g.save(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            EmbeddingGallery::load(&mut bad_magic.as_slice()),
            Err(GalleryError::Format(_))
        ));

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(
            EmbeddingGallery::load(&mut bad_version.as_slice()),
            Err(GalleryError::Format(_))
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            EmbeddingGallery::load(&mut &truncated[..]),
            Err(GalleryError::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn prop_rank_k_non_decreasing(seed in 0u64..200) {
            let g = random_gallery(DistanceMetric::L2, 4, 15, 5, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let queries: Vec<GalleryQuery> = (0..5)
                .map(|id| GalleryQuery {
                    identity_id: id,
                    embedding: raw((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                    exclude_index: None,
                })
                .collect();
            let ks = [1usize, 2, 5, 15];
            let cmc = g.evaluate_cmc(&queries, &ks).unwrap();
            for pair in cmc.windows(2) {
                prop_assert!(pair[0].1 <= pair[1].1);
            }
            // Every identity is present, so rank-|gallery| is 1.
            prop_assert_eq!(cmc.last().unwrap().1, 1.0);
        }

        #[test]
        fn prop_cmc_map_permutation_invariant(seed in 0u64..100) {
            let g = random_gallery(DistanceMetric::L2, 4, 12, 3, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 99);
            let queries: Vec<GalleryQuery> = (0..3)
                .map(|id| GalleryQuery {
                    identity_id: id,
                    embedding: raw((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                    exclude_index: None,
                })
                .collect();
            // Permute gallery entries.
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.shuffle(&mut rng);
            let mut permuted = EmbeddingGallery::new(DistanceMetric::L2, 4);
            for &i in &order {
                let e = &g.entries()[i];
                permuted
                    .add(e.identity_id, e.label.clone(), &raw(e.vector.clone()))
                    .unwrap();
            }
            let ks = [1usize, 3];
            let a = g.evaluate_cmc(&queries, &ks).unwrap();
            let b = permuted.evaluate_cmc(&queries, &ks).unwrap();
            prop_assert_eq!(a, b);
            let ma = g.evaluate_retrieval_map(&queries).unwrap();
            let mb = permuted.evaluate_retrieval_map(&queries).unwrap();
            prop_assert!((ma - mb).abs() < 1e-12);
        }
    }
}
