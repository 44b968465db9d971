//! Lloyd's k-means over frame features: the acoustic unit inventory.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, Domain};

const MAGIC: &[u8; 4] = b"JKM1";

#[derive(Debug, Clone)]
pub struct KMeansModel {
    /// K x D, row per centroid.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub d: usize,
    pub iterations: usize,
    /// Inertia after each Lloyd iteration, monotone non-increasing.
    pub inertia_history: Vec<f64>,
    pub seed: u64,
}

impl KMeansModel {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&f64::INFINITY)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
fn nearest(centroids: &[f64], k: usize, d: usize, x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = dist2(&centroids[0..d], x);
    for c in 1..k {
        let dd = dist2(&centroids[c * d..(c + 1) * d], x);
        if dd < best_d {
            best_d = dd;
            best = c;
        }
    }
    (best, best_d)
}

/// Weighted draw proportional to per-point squared distances.
fn weighted_pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        // All remaining points coincide with chosen centers.
        return 0;
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn kmeanspp_init<R: Rng>(features: &[f64], n: usize, d: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let mut centroids = vec![0.0; k * d];
    let first = rng.gen_range(0..n);
    centroids[0..d].copy_from_slice(&features[first * d..(first + 1) * d]);
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| dist2(&features[i * d..(i + 1) * d], &centroids[0..d]))
        .collect();
    for c in 1..k {
        let pick = weighted_pick(&min_d2, rng);
        let row = &features[pick * d..(pick + 1) * d];
        centroids[c * d..(c + 1) * d].copy_from_slice(row);
        for i in 0..n {
            let dd = dist2(&features[i * d..(i + 1) * d], row);
            if dd < min_d2[i] {
                min_d2[i] = dd;
            }
        }
    }
    centroids
}

/// Fit with k-means++ seeding, iterating to an assignment fixpoint or
/// `max_iters`. Empty clusters are re-seeded to the point farthest from
/// its current centroid, keeping K stable.
pub fn kmeans_fit(
    features: &[f64],
    n: usize,
    d: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansModel> {
    if n * d != features.len() || d == 0 {
        return Err(CoreError::Shape {
            op: "kmeans_fit",
            detail: format!("{} values for {} x {}", features.len(), n, d),
        });
    }
    if n < k || k == 0 {
        return Err(CoreError::Config(format!("{} frames cannot seed {} clusters", n, k)));
    }
    let mut rng = stream_rng(seed, Domain::KMeans, 0);
    let mut centroids = kmeanspp_init(features, n, d, k, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let pairs: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(&centroids, k, d, &features[i * d..(i + 1) * d]))
            .collect();
        let changed = pairs
            .iter()
            .enumerate()
            .any(|(i, &(a, _))| assign[i] != a);
        for (i, &(a, _)) in pairs.iter().enumerate() {
            assign[i] = a;
        }
        let inertia: f64 = pairs.iter().map(|&(_, dd)| dd).sum();
        if let Some(&prev) = history.last() {
            let tol = 1e-9 * prev.abs().max(1.0);
            if inertia > prev + tol {
                return Err(CoreError::Numerical(format!(
                    "inertia rose from {} to {}",
                    prev, inertia
                )));
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }

        // Mean update, fixed frame order.
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assign[i];
            counts[a] += 1;
            for (s, &v) in sums[a * d..(a + 1) * d]
                .iter_mut()
                .zip(&features[i * d..(i + 1) * d])
            {
                *s += v;
            }
        }
        let mut reassigned: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                // Farthest point from its own centroid takes over.
                let far = (0..n)
                    .filter(|i| !reassigned.contains(i))
                    .max_by(|&a, &b| {
                        pairs[a].1.partial_cmp(&pairs[b].1).unwrap()
                    })
                    .unwrap();
                reassigned.push(far);
                centroids[c * d..(c + 1) * d]
                    .copy_from_slice(&features[far * d..(far + 1) * d]);
            } else {
                for (j, s) in sums[c * d..(c + 1) * d].iter().enumerate() {
                    centroids[c * d + j] = s / counts[c] as f64;
                }
            }
        }
    }

    Ok(KMeansModel {
        centroids,
        k,
        d,
        iterations,
        inertia_history: history,
        seed,
    })
}

/// Nearest-centroid IDs for a frame matrix.
pub fn kmeans_assign(model: &KMeansModel, features: &[f64], n: usize, d: usize) -> Result<Vec<usize>> {
    if d != model.d || n * d != features.len() {
        return Err(CoreError::Shape {
            op: "kmeans_assign",
            detail: format!("features {} x {} against centroids {} x {}", n, d, model.k, model.d),
        });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| nearest(&model.centroids, model.k, model.d, &features[i * d..(i + 1) * d]).0)
        .collect())
}

/// Share of points whose cluster's dominant ground-truth label matches.
pub fn purity(assignments: &[usize], truth: &[usize], k: usize, n_labels: usize) -> f64 {
    assert_eq!(assignments.len(), truth.len());
    if assignments.is_empty() {
        return 0.0;
    }
    let mut table = vec![0usize; k * n_labels];
    for (&a, &t) in assignments.iter().zip(truth) {
        table[a * n_labels + t] += 1;
    }
    let dominant: usize = (0..k)
        .map(|c| *table[c * n_labels..(c + 1) * n_labels].iter().max().unwrap())
        .sum();
    dominant as f64 / assignments.len() as f64
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    k: usize,
    d: usize,
    seed: u64,
    inertia: f64,
    iterations: usize,
}

/// JSON header followed by the centroid matrix as little-endian f32.
pub fn save_model(model: &KMeansModel, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        k: model.k,
        d: model.d,
        seed: model.seed,
        inertia: model.inertia(),
        iterations: model.iterations,
    })
    .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + model.centroids.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for &v in &model.centroids {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<KMeansModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(CoreError::Checkpoint(format!("{} is not a cluster model", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(CoreError::Checkpoint("truncated cluster model header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let body = &bytes[12 + hlen..];
    let want = header.k * header.d * 4;
    if body.len() != want {
        return Err(CoreError::Checkpoint(format!(
            "centroid payload {} bytes, expected {}",
            body.len(),
            want
        )));
    }
    let centroids: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(KMeansModel {
        centroids,
        k: header.k,
        d: header.d,
        iterations: header.iterations,
        inertia_history: vec![header.inertia],
        seed: header.seed,
    })
}
