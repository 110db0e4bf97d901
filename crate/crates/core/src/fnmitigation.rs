//! False-negative prediction with k-reciprocal nearest neighbours.
//!
//! A sample `j` is a predicted false negative of `i` when the two are
//! k-reciprocal neighbours in the image target-slot space *and* in the audio
//! target-slot space. Predicted false negatives are removed from the
//! contrastive denominators.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Row-major `rows × dim` matrix of slot vectors (no gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::dim("embeddings", format!("{rows}x{dim}"), format!("{} values", data.len())));
        }
        Ok(Embeddings { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Pairwise cosine similarity, row-major `rows × other.rows`.
    pub fn cosine_to(&self, other: &Embeddings) -> Result<Vec<f64>> {
        if self.dim != other.dim {
            return Err(Error::dim("cosine", self.dim, other.dim));
        }
        let unit = |e: &Embeddings| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(e.data.len());
            for i in 0..e.rows {
                let r = e.row(i);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n > crate::diffcore::tape::MIN_NORM) {
                    return Err(Error::Degenerate(format!("row {i} has zero norm")));
                }
                out.extend(r.iter().map(|v| v / n));
            }
            Ok(out)
        };
        let (a, b) = (unit(self)?, unit(other)?);
        let d = self.dim;
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            for j in 0..other.rows {
                out[i * other.rows + j] = a[i * d..(i + 1) * d]
                    .iter()
                    .zip(&b[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        Ok(out)
    }
}

/// Orders candidates by descending similarity, then ascending index.
pub fn rank_desc(sims: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    idx.sort_by(|&a, &b| match sims[b].total_cmp(&sims[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}

/// For each row, the `k` other rows of highest cosine similarity.
pub fn knn_cosine(x: &Embeddings, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k >= x.rows {
        return Err(Error::Config(format!("k = {k} must satisfy 1 ≤ k < B = {}", x.rows)));
    }
    let sims = x.cosine_to(x)?;
    Ok((0..x.rows)
        .map(|i| {
            let row = &sims[i * x.rows..(i + 1) * x.rows];
            let mut ranked = rank_desc(row, (0..x.rows).filter(|&j| j != i));
            ranked.truncate(k);
            ranked
        })
        .collect())
}

/// `R(i) = { j : j ∈ N(i) ∧ i ∈ N(j) }`.
pub fn reciprocal_sets(knn: &[Vec<usize>]) -> Vec<BTreeSet<usize>> {
    let sets: Vec<BTreeSet<usize>> = knn.iter().map(|n| n.iter().copied().collect()).collect();
    (0..knn.len())
        .map(|i| sets[i].iter().copied().filter(|&j| sets[j].contains(&i)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSets {
    pub k: usize,
    pub knn_image: Vec<Vec<usize>>,
    pub knn_audio: Vec<Vec<usize>>,
    pub reciprocal_image: Vec<BTreeSet<usize>>,
    pub reciprocal_audio: Vec<BTreeSet<usize>>,
    /// Predicted false negatives per sample.
    pub predicted: Vec<BTreeSet<usize>>,
    /// Row-major `B×B`; false where a pair is excluded from the denominators.
    pub keep: Vec<bool>,
}

impl NeighborSets {
    pub fn batch(&self) -> usize {
        self.predicted.len()
    }

    pub fn excluded_pairs(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    /// One JSON line per sample: `{"step", "sample", "neighbors"}`.
    pub fn write_jsonl<W: Write>(&self, step: u64, ids: &[usize], out: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            step: u64,
            sample: usize,
            neighbors: &'a [usize],
        }
        for (i, set) in self.predicted.iter().enumerate() {
            let neighbors: Vec<usize> = set.iter().map(|&j| ids.get(j).copied().unwrap_or(j)).collect();
            let rec = Record {
                step,
                sample: ids.get(i).copied().unwrap_or(i),
                neighbors: &neighbors,
            };
            serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `k` actually used for a batch of `b`: clamped to `b − 1`.
pub fn effective_k(k: usize, b: usize) -> usize {
    k.min(b.saturating_sub(1))
}

/// Builds the k-reciprocal neighbour sets of both modalities, their
/// intersection and the contrastive keep-mask.
pub fn reciprocal_filter(slots_image: &Embeddings, slots_audio: &Embeddings, k: usize) -> Result<NeighborSets> {
    if slots_image.rows != slots_audio.rows {
        return Err(Error::dim("reciprocal_filter", slots_image.rows, slots_audio.rows));
    }
    let b = slots_image.rows;
    let k_eff = effective_k(k, b);
    if k_eff < k {
        log::warn!("k = {k} clamped to {k_eff} for batch of {b}");
    }
    let mut keep = vec![true; b * b];
    if k_eff == 0 {
        return Ok(NeighborSets {
            k: 0,
            knn_image: vec![Vec::new(); b],
            knn_audio: vec![Vec::new(); b],
            reciprocal_image: vec![BTreeSet::new(); b],
            reciprocal_audio: vec![BTreeSet::new(); b],
            predicted: vec![BTreeSet::new(); b],
            keep,
        });
    }
    let knn_image = knn_cosine(slots_image, k_eff)?;
    let knn_audio = knn_cosine(slots_audio, k_eff)?;
    let reciprocal_image = reciprocal_sets(&knn_image);
    let reciprocal_audio = reciprocal_sets(&knn_audio);
    let predicted: Vec<BTreeSet<usize>> = reciprocal_image
        .iter()
        .zip(&reciprocal_audio)
        .map(|(v, a)| v.intersection(a).copied().collect())
        .collect();
    for (i, set) in predicted.iter().enumerate() {
        for &j in set {
            keep[i * b + j] = false;
        }
    }
    Ok(NeighborSets {
        k: k_eff,
        knn_image,
        knn_audio,
        reciprocal_image,
        reciprocal_audio,
        predicted,
        keep,
    })
}
