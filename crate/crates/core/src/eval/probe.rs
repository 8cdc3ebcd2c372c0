use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Held-out accuracy of the least-squares linear classifier.
    pub accuracy: f64,
    pub silhouette: f64,
    /// False when all embeddings coincide; silhouette is then reported as 0.
    pub silhouette_defined: bool,
    pub train_size: usize,
    pub test_size: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn silhouette(x: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(&x[i], &x[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 && b.is_finite() {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Fewest samples per class [`embedding_probe`] accepts.
pub const MIN_PER_CLASS: usize = 8;

/// Closed-form linear probe: per class, half the samples (rounded up,
/// chosen by `seed`) fit a least-squares map from `[emb, 1]` to one-hot
/// labels; the rest are classified by argmax. Labels are `0..K`.
pub fn embedding_probe(embeddings: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<ProbeResult> {
    ensure!(
        embeddings.len() == labels.len(),
        "embedding_probe: {} embeddings vs {} labels",
        embeddings.len(),
        labels.len()
    );
    ensure!(!embeddings.is_empty(), "embedding_probe: no embeddings");
    let d = embeddings[0].len();
    ensure!(d > 0 && embeddings.iter().all(|e| e.len() == d), "embedding_probe: ragged embeddings");
    ensure!(
        embeddings.iter().flatten().all(|v| v.is_finite()),
        "embedding_probe: non-finite embedding"
    );
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    ensure!(
        by_class.iter().filter(|c| !c.is_empty()).count() >= 2,
        "embedding_probe: need at least two classes"
    );
    ensure!(
        by_class.iter().all(|c| c.is_empty() || c.len() >= MIN_PER_CLASS),
        "embedding_probe: need at least {MIN_PER_CLASS} samples per class"
    );
    let present = by_class.iter().filter(|c| !c.is_empty()).count();

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, idx) in by_class.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng_for(seed, "probe-split", c as u64));
        let cut = idx.len().div_ceil(2);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }

    let first = &embeddings[0];
    if embeddings.iter().all(|e| e == first) {
        return Ok(ProbeResult {
            accuracy: 1.0 / present as f64,
            silhouette: 0.0,
            silhouette_defined: false,
            train_size: train.len(),
            test_size: test.len(),
        });
    }

    let design = |rows: &[usize]| DMatrix::from_fn(rows.len(), d + 1, |r, c| if c < d { embeddings[rows[r]][c] } else { 1.0 });
    let a = design(&train);
    let y = DMatrix::from_fn(train.len(), k, |r, c| (labels[train[r]] == c) as u8 as f64);
    let svd = a.svd(true, true);
    let tol = 1e-10 * svd.singular_values.max().max(1e-300);
    let w = svd
        .solve(&y, tol)
        .map_err(|e| crate::Error::numeric(format!("embedding_probe: least squares failed: {e}")))?;
    let scores = design(&test) * w;
    let correct = (0..test.len())
        .filter(|&r| {
            let row = scores.row(r);
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == labels[test[r]]
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len().max(1) as f64,
        silhouette: silhouette(embeddings, labels, k),
        silhouette_defined: true,
        train_size: train.len(),
        test_size: test.len(),
    })
}
