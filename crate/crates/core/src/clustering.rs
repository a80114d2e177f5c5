//! k-Means over reduced tokens and the binary prototype masks derived from
//! its assignments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, TokenMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 4,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    assignments: Vec<usize>,
    inertia: f64,
    inertia_history: Vec<f64>,
    iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Sum of squared distances of points to their assigned centroids.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Inertia after every assignment step, in order.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Build a model from externally produced labels (centroids left empty).
    pub fn from_assignments(k: usize, assignments: Vec<usize>) -> Result<Self> {
        if let Some(bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::validation(format!("assignment {bad} outside 0..{k}")));
        }
        Ok(Self {
            k,
            dim: 0,
            centroids: Vec::new(),
            assignments,
            inertia: 0.0,
            inertia_history: Vec::new(),
            iterations: 0,
        })
    }
}

#[inline]
fn sq_dist(point: &[f64], centroid: &[f64]) -> f64 {
    point
        .iter()
        .zip(centroid)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn count_distinct(m: &TokenMatrix, cap: usize) -> usize {
    let mut order: Vec<usize> = (0..m.rows()).collect();
    let cmp = |a: &usize, b: &usize| {
        m.row(*a)
            .iter()
            .zip(m.row(*b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    order.sort_by(cmp);
    let mut distinct = usize::from(!order.is_empty());
    for w in order.windows(2) {
        if cmp(&w[0], &w[1]).is_ne() {
            distinct += 1;
            if distinct >= cap {
                break;
            }
        }
    }
    distinct
}

struct Lloyd<'a> {
    points: &'a [f64],
    dim: usize,
    k: usize,
}

impl Lloyd<'_> {
    fn n(&self) -> usize {
        self.points.len() / self.dim.max(1)
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Assign each point to its nearest centroid (ties: lowest index).
    /// Returns the inertia; fills squared distances per point.
    fn assign(&self, centroids: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
        let mut inertia = 0.0;
        for i in 0..self.n() {
            let p = self.point(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..self.k {
                let d = sq_dist(p, &centroids[c * self.dim..(c + 1) * self.dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
            dists[i] = best_d;
            inertia += best_d;
        }
        inertia
    }

    /// Greedy k-means++ seeding.
    fn seed(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.n();
        let trials = 2 + (self.k as f64).ln().floor() as usize;
        let mut centroids = Vec::with_capacity(self.k * self.dim);
        let first = rng.gen_range(0..n);
        centroids.extend_from_slice(self.point(first));
        let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(self.point(i), self.point(first))).collect();

        for _ in 1..self.k {
            let total: f64 = closest.iter().sum();
            let mut best: Option<(usize, f64, Vec<f64>)> = None;
            for _ in 0..trials {
                let target = rng.gen::<f64>() * total;
                let cand = self.sample_index(&closest, target);
                let cand_d: Vec<f64> = (0..n)
                    .map(|i| sq_dist(self.point(i), self.point(cand)).min(closest[i]))
                    .collect();
                let potential: f64 = cand_d.iter().sum();
                if best.as_ref().map_or(true, |(_, p, _)| potential < *p) {
                    best = Some((cand, potential, cand_d));
                }
            }
            let (idx, _, d) = best.expect("at least two trials");
            centroids.extend_from_slice(self.point(idx));
            closest = d;
        }
        centroids
    }

    fn sample_index(&self, weights: &[f64], target: f64) -> usize {
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if acc > target && w > 0.0 {
                return i;
            }
        }
        // rounding pushed target past the total: take the last candidate with weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Move centroids to the means of their points. Empty clusters are
    /// re-seeded at the point farthest from its centroid. Returns the largest
    /// centroid displacement.
    fn update(&self, centroids: &mut [f64], labels: &[usize], dists: &[f64]) -> f64 {
        let dim = self.dim;
        let mut sums = vec![0.0f64; self.k * dim];
        let mut counts = vec![0usize; self.k];
        for i in 0..self.n() {
            let c = labels[i];
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(self.point(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; self.n()];
        let mut shift = 0.0f64;
        for c in 0..self.k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|s| s / counts[c] as f64)
                    .collect()
            } else {
                let far = (0..self.n())
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("more points than clusters");
                taken[far] = true;
                self.point(far).to_vec()
            };
            let old = &mut centroids[c * dim..(c + 1) * dim];
            shift = shift.max(sq_dist(&new, old).sqrt());
            old.copy_from_slice(&new);
        }
        shift
    }
}

/// Lloyd's k-Means with greedy k-means++ seeding drawn from `params.seed`.
pub fn kmeans_fit(reduced: &TokenMatrix, params: &KMeansParams) -> Result<ClusterModel> {
    let k = params.k;
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if reduced.rows() < k {
        return Err(Error::validation(format!(
            "k = {k} exceeds the {} available points",
            reduced.rows()
        )));
    }
    ensure_finite(reduced.data())?;
    let distinct = count_distinct(reduced, k);
    if distinct < k {
        return Err(Error::validation(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }

    let points: Vec<f64> = reduced.data().iter().map(|&v| f64::from(v)).collect();
    let dim = reduced.cols();
    let lloyd = Lloyd {
        points: &points,
        dim,
        k,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = lloyd.seed(&mut rng);
    let n = reduced.rows();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..params.max_iters {
        history.push(lloyd.assign(&centroids, &mut labels, &mut dists));
        let shift = lloyd.update(&mut centroids, &labels, &dists);
        iterations += 1;
        if shift < params.tol {
            break;
        }
    }
    let inertia = lloyd.assign(&centroids, &mut labels, &mut dists);
    history.push(inertia);

    Ok(ClusterModel {
        k,
        dim,
        centroids,
        assignments: labels,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// `k` binary masks over `n_views x d x d` token cells that partition the
/// cells. Stored as one label per cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    k: usize,
    n_views: usize,
    d: usize,
    labels: Vec<usize>,
}

impl MaskSet {
    pub fn from_labels(k: usize, n_views: usize, d: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != n_views * d * d {
            return Err(Error::validation(format!(
                "{} labels for {n_views} views of {d}x{d}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::validation(format!("label {bad} outside 0..{k}")));
        }
        Ok(Self {
            k,
            n_views,
            d,
            labels,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Mask index owning every cell of `view`, row-major.
    pub fn view_labels(&self, view: usize) -> &[usize] {
        let cells = self.d * self.d;
        &self.labels[view * cells..(view + 1) * cells]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Mask `i` as a bit grid of shape `n_views x d x d`.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l == i).collect()
    }

    pub fn contains(&self, i: usize, view: usize, cell: usize) -> bool {
        self.view_labels(view)[cell] == i
    }
}

pub fn assignments_to_masks(model: &ClusterModel, n_views: usize, d: usize) -> Result<MaskSet> {
    MaskSet::from_labels(model.k(), n_views, d, model.assignments().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> TokenMatrix {
        TokenMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn one_dimensional_two_clusters() {
        let m = matrix(4, 1, vec![0.0, 0.1, 10.0, 10.1]);
        let model = kmeans_fit(&m, &KMeansParams::new(2)).unwrap();
        let a = model.assignments();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        let lo = model.centroid(a[0])[0];
        let hi = model.centroid(a[2])[0];
        assert!((lo - 0.05).abs() < 1e-6 && (hi - 10.05).abs() < 1e-6);
    }

    #[test]
    fn k_one_is_the_mean() {
        let m = matrix(3, 2, vec![0.0, 0.0, 3.0, 0.0, 0.0, 6.0]);
        let model = kmeans_fit(&m, &KMeansParams::new(1)).unwrap();
        assert!((model.centroid(0)[0] - 1.0).abs() < 1e-12);
        assert!((model.centroid(0)[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_distinct_points() {
        let m = matrix(4, 1, vec![1.0, 1.0, 1.0, 2.0]);
        assert!(matches!(
            kmeans_fit(&m, &KMeansParams::new(3)),
            Err(Error::Validation(_))
        ));
        assert!(kmeans_fit(&m, &KMeansParams::new(2)).is_ok());
        assert!(kmeans_fit(&m, &KMeansParams::new(0)).is_err());
    }

    #[test]
    fn equidistant_point_goes_to_lowest_centroid() {
        let lloyd = Lloyd {
            points: &[1.0],
            dim: 1,
            k: 2,
        };
        let mut labels = [9];
        let mut dists = [0.0];
        lloyd.assign(&[0.0, 2.0], &mut labels, &mut dists);
        assert_eq!(labels[0], 0);
        lloyd.assign(&[2.0, 0.0], &mut labels, &mut dists);
        assert_eq!(labels[0], 0);
    }

    #[test]
    fn empty_cluster_reseeded_from_farthest_point() {
        let pts = [0.0, 1.0, 9.0];
        let lloyd = Lloyd {
            points: &pts,
            dim: 1,
            k: 2,
        };
        let mut centroids = [0.0, 100.0];
        let mut labels = [0; 3];
        let mut dists = [0.0; 3];
        lloyd.assign(&centroids, &mut labels, &mut dists);
        assert_eq!(labels, [0, 0, 0]);
        lloyd.update(&mut centroids, &labels, &dists);
        assert_eq!(centroids[1], 9.0);
    }

    #[test]
    fn masks_all_zero_assignment() {
        let model = ClusterModel::from_assignments(2, vec![0; 4]).unwrap();
        let masks = assignments_to_masks(&model, 1, 2).unwrap();
        assert!(masks.mask(0).iter().all(|&b| b));
        assert!(masks.mask(1).iter().all(|&b| !b));
    }

    #[test]
    fn masks_diagonal() {
        let model = ClusterModel::from_assignments(2, vec![0, 1, 1, 0]).unwrap();
        let masks = assignments_to_masks(&model, 1, 2).unwrap();
        assert_eq!(masks.mask(0), vec![true, false, false, true]);
    }

    #[test]
    fn masks_length_mismatch() {
        let model = ClusterModel::from_assignments(2, vec![0, 1, 1]).unwrap();
        assert!(assignments_to_masks(&model, 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn fit_is_deterministic_monotone_and_partitions(seed in 0u64..500, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = matrix(30, 2, data);
            let params = KMeansParams { k, seed, ..KMeansParams::default() };
            let a = kmeans_fit(&m, &params).unwrap();
            let b = kmeans_fit(&m, &params).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.inertia_history().windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            let masks = assignments_to_masks(&a, 1, 1).err();
            prop_assert!(masks.is_some()); // 30 points are not a 1x1 grid
            let masks = MaskSet::from_labels(k, 30, 1, a.assignments().to_vec()).unwrap();
            for cell in 0..30 {
                let owners = (0..k).filter(|&i| masks.mask(i)[cell]).count();
                prop_assert_eq!(owners, 1);
            }
        }
    }
}
