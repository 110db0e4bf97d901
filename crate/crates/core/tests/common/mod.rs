//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::collections::BTreeSet;

use jsaloc::fnmitigation::Embeddings;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn cosine(x: &Embeddings, i: usize, j: usize) -> f64 {
    let (a, b) = (x.row(i), x.row(j));
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let n = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

/// k nearest neighbors by repeated selection of the most similar remaining
/// row; exact ties go to the lower index.
pub fn brute_knn(x: &Embeddings, k: usize) -> Vec<Vec<usize>> {
    (0..x.rows)
        .map(|i| {
            let mut out = Vec::new();
            let mut left: Vec<usize> = (0..x.rows).filter(|&j| j != i).collect();
            while out.len() < k {
                let mut best = left[0];
                for &j in &left[1..] {
                    if cosine(x, i, j) > cosine(x, i, best) {
                        best = j;
                    }
                }
                out.push(best);
                left.retain(|&j| j != best);
            }
            out
        })
        .collect()
}

/// Predicted false negatives of sample `i`: mutual neighbors in both modalities.
pub fn brute_predicted(image: &Embeddings, audio: &Embeddings, k: usize) -> Vec<BTreeSet<usize>> {
    let (ni, na) = (brute_knn(image, k), brute_knn(audio, k));
    let mutual = |n: &Vec<Vec<usize>>, i: usize| -> BTreeSet<usize> {
        n[i].iter().copied().filter(|&j| n[j].contains(&i)).collect()
    };
    (0..image.rows)
        .map(|i| mutual(&ni, i).intersection(&mutual(&na, i)).copied().collect())
        .collect()
}
