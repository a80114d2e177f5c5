//! Segmentation metrics and k-NN label transfer onto point clouds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Ratios in `[0, 1]`; any `0 / 0` is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub fsc: f64,
    pub pre: f64,
    pub rec: f64,
}

impl Metrics {
    /// The same ratios scaled to `[0, 100]`.
    pub fn percent(&self) -> Self {
        Self {
            iou: 100.0 * self.iou,
            fsc: 100.0 * self.fsc,
            pre: 100.0 * self.pre,
            rec: 100.0 * self.rec,
        }
    }
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "prediction has {} elements, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &Confusion) -> Metrics {
    let pre = ratio(c.tp, c.tp + c.fp);
    let rec = ratio(c.tp, c.tp + c.fn_);
    let fsc = if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    };
    Metrics {
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        fsc,
        pre,
        rec,
    }
}

/// Adjusted Rand index between two labelings of the same elements.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation("labelings differ in length"));
    }
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&v| pairs(v)).sum();
    let rows: f64 = (0..ka)
        .map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum()))
        .sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum()))
        .sum();
    let expected = rows * cols / (n * (n - 1.0) / 2.0);
    let max = (rows + cols) / 2.0;
    if max == expected {
        // both labelings trivial (one cluster or all singletons)
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[inline]
fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Candidate ordering for neighbour search: distance, then point index.
#[inline]
fn closer(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

enum Node {
    Leaf(Vec<usize>),
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Static 3-d tree answering exact k-nearest queries.
struct KdTree<'a> {
    points: &'a [[f64; 3]],
    root: Node,
}

const LEAF_SIZE: usize = 16;

impl<'a> KdTree<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let idx: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(points, idx);
        Self { points, root }
    }

    fn build(points: &[[f64; 3]], mut idx: Vec<usize>) -> Node {
        if idx.len() <= LEAF_SIZE {
            return Node::Leaf(idx);
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(points[i][ax]), hi.max(points[i][ax]))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap_or(0);
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let value = points[idx[mid]][axis];
        let right = idx.split_off(mid);
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build(points, idx)),
            right: Box::new(Self::build(points, right)),
        }
    }

    /// The `k` nearest points to `q`, ordered by (distance, index).
    fn nearest(&self, q: &[f64; 3], k: usize) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(&self.root, q, k, &mut best);
        best
    }

    fn offer(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
        if best.len() == k && !closer(cand, best[k - 1]) {
            return;
        }
        let pos = best.partition_point(|&b| closer(b, cand));
        best.insert(pos, cand);
        best.truncate(k);
    }

    fn search(&self, node: &Node, q: &[f64; 3], k: usize, best: &mut Vec<(f64, usize)>) {
        match node {
            Node::Leaf(idx) => {
                for &i in idx {
                    Self::offer(best, k, (sq_dist(&self.points[i], q), i));
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                // equal distances must still be visited for the index tie-break
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

fn majority(labels: impl Iterator<Item = u32>) -> u32 {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(x, _)| *x == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .expect("at least one neighbour")
}

/// Give each target point the majority label of its `k` nearest labeled
/// points (Euclidean). Vote ties go to the smallest label; equidistant
/// neighbours are ranked by their index in `gt_points`.
pub fn project_labels_knn(
    gt_points: &[[f64; 3]],
    gt_labels: &[u32],
    targets: &[[f64; 3]],
    k: usize,
) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if gt_points.is_empty() {
        return Err(Error::validation("no labeled points to project from"));
    }
    if gt_points.len() != gt_labels.len() {
        return Err(Error::validation(format!(
            "{} labeled points but {} labels",
            gt_points.len(),
            gt_labels.len()
        )));
    }
    let tree = KdTree::new(gt_points);
    Ok(targets
        .par_iter()
        .map(|q| majority(tree.nearest(q, k).into_iter().map(|(_, i)| gt_labels[i])))
        .collect())
}
