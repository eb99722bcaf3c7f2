//! Low-resolution segmentation: k-means clustering of a feature map's
//! d-dimensional cells into K binary masks.

use crate::backend::synthetic::mix_seed;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// An h x w grid of d-dimensional feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if height * width == 0 || dim == 0 {
            return Err(Error::EmptyInput("feature map"));
        }
        if values.len() != height * width * dim {
            return Err(Error::InvalidConfig(format!(
                "feature map has {} floats, expected {}",
                values.len(),
                height * width * dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature map",
            });
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * dim);
        for y in 0..height {
            for x in 0..width {
                let v = f(y, x);
                assert_eq!(v.len(), dim);
                values.extend_from_slice(&v);
            }
        }
        Self::new(height, width, dim, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of the cell at row-major index `cell`.
    #[inline]
    pub fn cell_vector(&self, cell: usize) -> &[f32] {
        &self.values[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        self.cell_vector(y * self.width + x)
    }
}

/// A K-way partition of the feature grid: disjoint nonempty binary masks
/// covering every cell, plus the cluster centroids and final within-cluster
/// sum of squared distances.
#[derive(Debug, Clone)]
pub struct LowResSegmentation {
    masks: Vec<BinaryMask>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
}

impl LowResSegmentation {
    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn num_masks(&self) -> usize {
        self.masks.len()
    }

    pub fn grid_height(&self) -> usize {
        self.masks[0].height()
    }

    pub fn grid_width(&self) -> usize {
        self.masks[0].width()
    }

    /// Mask index of every cell, row-major.
    pub fn cell_assignments(&self) -> Vec<usize> {
        let cells = self.grid_height() * self.grid_width();
        let mut out = vec![usize::MAX; cells];
        for (k, mask) in self.masks.iter().enumerate() {
            for cell in mask.set_cells() {
                out[cell] = k;
            }
        }
        debug_assert!(out.iter().all(|&a| a != usize::MAX));
        out
    }

    pub fn from_masks(masks: Vec<BinaryMask>, centroids: Vec<Vec<f64>>, inertia: f64) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::EmptyInput("mask list"));
        }
        let (h, w) = (masks[0].height(), masks[0].width());
        let mut covered = vec![false; h * w];
        for m in &masks {
            if m.height() != h || m.width() != w {
                return Err(Error::DimensionMismatch {
                    what: "segmentation mask",
                    want_h: h,
                    want_w: w,
                    got_h: m.height(),
                    got_w: m.width(),
                });
            }
            if m.is_empty() {
                return Err(Error::EmptyMask);
            }
            for cell in m.set_cells() {
                if covered[cell] {
                    return Err(Error::InvalidConfig(format!("cell {cell} covered twice")));
                }
                covered[cell] = true;
            }
        }
        if !covered.iter().all(|&c| c) {
            return Err(Error::InvalidConfig("masks do not cover the grid".into()));
        }
        Ok(Self {
            masks,
            centroids,
            inertia,
        })
    }
}

pub(crate) struct KmeansOutcome {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
}

const MAX_ITERATIONS: usize = 300;

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Cumulative-sum inverse sampling; deterministic given the rng stream.
fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if r < acc {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// k-means++ seeding: first centroid sampled by weight, each subsequent one
/// by weight times squared distance to the nearest chosen centroid.
fn plus_plus_init(
    rng: &mut ChaCha8Rng,
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = sample_weighted(rng, weights).unwrap_or(0);
    centroids.push(points[first].clone());

    let mut nearest = vec![f64::INFINITY; points.len()];
    while centroids.len() < k {
        let last = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(p, last));
        }
        let draw: Vec<f64> = nearest
            .iter()
            .zip(weights)
            .map(|(d, w)| d * w)
            .collect();
        match sample_weighted(rng, &draw) {
            Some(i) => centroids.push(points[i].clone()),
            // every point coincides with a centroid; duplicate the lowest
            // index and let empty-cluster repair sort it out
            None => centroids.push(points[centroids.len() % points.len()].clone()),
        }
    }
    centroids
}

/// Lloyd iterations to convergence (assignments unchanged) or the iteration
/// cap, with empty clusters repaired by donating the farthest point of a
/// multi-point cluster. The inertia trace is non-increasing.
fn lloyd(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    mut centroids: Vec<Vec<f64>>,
) -> KmeansOutcome {
    let n = points.len();
    let dim = points[0].len();
    let mut assignments = vec![0usize; n];
    let mut prev_assignments: Option<Vec<usize>> = None;
    let mut inertia_trace = Vec::new();

    for _iter in 0..MAX_ITERATIONS {
        // assignment step: nearest centroid, ties to the lowest index
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = dist2(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assignments[i] = best;
        }

        // empty-cluster repair: move the farthest cell of a donor cluster
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let mut repaired = false;
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let mut donor: Option<(usize, f64)> = None;
            for (i, p) in points.iter().enumerate() {
                if counts[assignments[i]] < 2 {
                    continue;
                }
                let d = dist2(p, &centroids[assignments[i]]);
                if donor.map_or(true, |(_, best)| d > best) {
                    donor = Some((i, d));
                }
            }
            if let Some((i, _)) = donor {
                counts[assignments[i]] -= 1;
                assignments[i] = empty;
                counts[empty] = 1;
                centroids[empty] = points[i].clone();
                repaired = true;
            }
        }

        // update step: weighted means
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut mass = vec![0.0f64; k];
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            mass[a] += weights[i];
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += weights[i] * v;
            }
        }
        for j in 0..k {
            if mass[j] > 0.0 {
                for s in &mut sums[j] {
                    *s /= mass[j];
                }
                centroids[j] = std::mem::take(&mut sums[j]);
            }
        }

        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .zip(weights)
            .map(|((p, &a), &w)| w * dist2(p, &centroids[a]))
            .sum();
        if let Some(last) = inertia_trace.last() {
            debug_assert!(inertia <= last + 1e-9, "inertia increased: {last} -> {inertia}");
        }
        inertia_trace.push(inertia);

        let converged = !repaired && prev_assignments.as_deref() == Some(assignments.as_slice());
        prev_assignments = Some(assignments.clone());
        if converged {
            break;
        }
    }

    let inertia = *inertia_trace.last().unwrap();
    KmeansOutcome {
        assignments,
        centroids,
        inertia,
        inertia_trace,
    }
}

pub(crate) fn run_seed(seed: u64, restart: u64) -> u64 {
    mix_seed(&[seed, 0x6b6d, restart])
}

/// Weighted k-means over arbitrary points; `restarts` independent seeded
/// runs, keeping the lowest inertia (earliest run wins ties).
pub(crate) fn weighted_kmeans(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KmeansOutcome> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidClusterCount {
            requested: k,
            available: points.len(),
        });
    }
    let restarts = restarts.max(1);
    let mut best: Option<KmeansOutcome> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(seed, r as u64));
        let init = plus_plus_init(&mut rng, points, weights, k);
        let outcome = lloyd(points, weights, k, init);
        if best.as_ref().map_or(true, |b| outcome.inertia < b.inertia) {
            best = Some(outcome);
        }
    }
    Ok(best.unwrap())
}

fn features_as_points(features: &FeatureMap) -> Result<Vec<Vec<f64>>> {
    if features.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "feature map",
        });
    }
    Ok((0..features.cells())
        .map(|c| features.cell_vector(c).iter().map(|&v| v as f64).collect())
        .collect())
}

fn outcome_to_segmentation(
    features: &FeatureMap,
    k: usize,
    outcome: KmeansOutcome,
) -> Result<LowResSegmentation> {
    let (h, w) = (features.height(), features.width());
    let mut masks = vec![BinaryMask::new(h, w); k];
    for (cell, &a) in outcome.assignments.iter().enumerate() {
        masks[a].set(cell / w, cell % w, true);
    }
    LowResSegmentation::from_masks(masks, outcome.centroids, outcome.inertia)
}

/// Clusters the feature map into `k` low-resolution segmentation masks with
/// a single seeded k-means++ run.
pub fn kmeans_cluster(features: &FeatureMap, k: usize, seed: u64) -> Result<LowResSegmentation> {
    kmeans_cluster_restarts(features, k, seed, 1)
}

/// Same as [`kmeans_cluster`] with several independent seeded restarts,
/// keeping the partition with the lowest inertia.
pub fn kmeans_cluster_restarts(
    features: &FeatureMap,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<LowResSegmentation> {
    let points = features_as_points(features)?;
    let weights = vec![1.0; points.len()];
    let outcome = weighted_kmeans(&points, &weights, k, seed, restarts)?;
    outcome_to_segmentation(features, k, outcome)
}

/// Per-iteration inertia of a single seeded run; exposed for the Lloyd
/// monotonicity property.
pub fn kmeans_inertia_trace(features: &FeatureMap, k: usize, seed: u64) -> Result<Vec<f64>> {
    let points = features_as_points(features)?;
    let weights = vec![1.0; points.len()];
    if k == 0 || k > points.len() {
        return Err(Error::InvalidClusterCount {
            requested: k,
            available: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed(seed, 0));
    let init = plus_plus_init(&mut rng, &points, &weights, k);
    Ok(lloyd(&points, &weights, k, init).inertia_trace)
}
