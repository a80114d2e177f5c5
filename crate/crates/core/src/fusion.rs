//! Multi-view fusion: spatially conditioned clustering input, projection of
//! pooled features onto world points, and voxel downsampling into a
//! language-queryable map.

use std::collections::BTreeMap;

use nalgebra::Point3;
use rayon::prelude::*;

use crate::alignment::{minmax_normalize, PooledGrid, PromptSet};
use crate::error::{Error, Result};
use crate::geometry::{GlobalPoints, PatchPointMap};
use crate::tensor::{normalize_in_place, TokenGrid, TokenMatrix};

/// Vision features concatenated with standardized world coordinates, one row
/// per token cell that has geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMatrix {
    matrix: TokenMatrix,
    vision_channels: usize,
    /// `(view, cell)` each row came from.
    origins: Vec<(usize, usize)>,
}

impl SpatialMatrix {
    pub fn matrix(&self) -> &TokenMatrix {
        &self.matrix
    }

    pub fn vision_channels(&self) -> usize {
        self.vision_channels
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }
}

fn check_views(n_views: usize, maps: &[PatchPointMap], cells: usize) -> Result<()> {
    if maps.len() != n_views {
        return Err(Error::validation(format!(
            "{n_views} views but {} patch-point maps",
            maps.len()
        )));
    }
    for (i, m) in maps.iter().enumerate() {
        if m.cells().len() != cells {
            return Err(Error::validation(format!(
                "patch-point map {i} covers {} cells, expected {cells}",
                m.cells().len()
            )));
        }
    }
    Ok(())
}

pub fn build_spatial_features(
    vision: &[TokenGrid],
    points: &GlobalPoints,
    maps: &[PatchPointMap],
) -> Result<SpatialMatrix> {
    let first = vision
        .first()
        .ok_or_else(|| Error::validation("no vision grids"))?;
    let (d, c) = (first.d(), first.channels());
    if let Some(g) = vision.iter().find(|g| g.d() != d || g.channels() != c) {
        return Err(Error::validation(format!(
            "vision grid {}x{}x{} differs from {d}x{d}x{c}",
            g.d(),
            g.d(),
            g.channels()
        )));
    }
    check_views(vision.len(), maps, d * d)?;

    let mut origins = Vec::new();
    let mut coords: Vec<[f64; 3]> = Vec::new();
    for (view, map) in maps.iter().enumerate() {
        for (cell, p) in map.cells().iter().enumerate() {
            if let Some(p) = *p {
                let pt = points
                    .points
                    .get(p)
                    .ok_or_else(|| Error::Integrity(format!("point index {p} out of range")))?;
                origins.push((view, cell));
                coords.push([pt.x, pt.y, pt.z]);
            }
        }
    }
    if origins.is_empty() {
        return Err(Error::EmptyGeometry("no token cell has a 3D point".into()));
    }

    let n = coords.len() as f64;
    let mut mean = [0.0f64; 3];
    for p in &coords {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0f64; 3];
    for p in &coords {
        for a in 0..3 {
            std[a] += (p[a] - mean[a]).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n).sqrt());

    let cols = c + 3;
    let mut data = Vec::with_capacity(origins.len() * cols);
    for (&(view, cell), p) in origins.iter().zip(&coords) {
        data.extend_from_slice(vision[view].cell(cell));
        for a in 0..3 {
            let centred = p[a] - mean[a];
            // a flat axis carries no information; keep it at zero
            let z = if std[a] > 0.0 { centred / std[a] } else { 0.0 };
            data.push(z as f32);
        }
    }
    Ok(SpatialMatrix {
        matrix: TokenMatrix::new(origins.len(), cols, data)?,
        vision_channels: c,
        origins,
    })
}

/// World points paired with language-grounded features.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCloud {
    points: Vec<Point3<f64>>,
    features: Vec<f32>,
    channels: usize,
    view_of_point: Vec<usize>,
}

impl SemanticCloud {
    pub fn new(points: Vec<Point3<f64>>, features: Vec<f32>, channels: usize, view_of_point: Vec<usize>) -> Result<Self> {
        if features.len() != points.len() * channels || view_of_point.len() != points.len() {
            return Err(Error::validation(format!(
                "cloud of {} points needs {} feature values and {} view tags",
                points.len(),
                points.len() * channels,
                points.len()
            )));
        }
        Ok(Self {
            points,
            features,
            channels,
            view_of_point,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn view_of_point(&self) -> &[usize] {
        &self.view_of_point
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &SemanticCloud) -> Result<SemanticCloud> {
        if self.channels != other.channels && !self.is_empty() && !other.is_empty() {
            return Err(Error::validation("cannot concatenate clouds with different channels"));
        }
        let channels = if self.is_empty() { other.channels } else { self.channels };
        SemanticCloud::new(
            self.points.iter().chain(&other.points).copied().collect(),
            self.features.iter().chain(&other.features).copied().collect(),
            channels,
            self.view_of_point.iter().chain(&other.view_of_point).copied().collect(),
        )
    }
}

/// Emit one cloud row per (view, cell) that has a world point, carrying the
/// pooled feature of that cell. Views are never merged here.
pub fn project_pooled_to_points(
    pooled: &[PooledGrid],
    points: &GlobalPoints,
    maps: &[PatchPointMap],
) -> Result<SemanticCloud> {
    let first = pooled
        .first()
        .ok_or_else(|| Error::validation("no pooled grids"))?;
    let (d, c) = (first.d(), first.channels());
    if let Some(p) = pooled.iter().find(|p| !p.is_normalized()) {
        return Err(Error::validation(format!(
            "pooled grid of view {} is not normalized",
            p.view_index()
        )));
    }
    if pooled.iter().any(|p| p.d() != d || p.channels() != c) {
        return Err(Error::validation("pooled grids differ in shape"));
    }
    check_views(pooled.len(), maps, d * d)?;

    let mut out_points = Vec::new();
    let mut features = Vec::new();
    let mut views = Vec::new();
    for (grid, map) in pooled.iter().zip(maps) {
        for (cell, p) in map.cells().iter().enumerate() {
            let Some(p) = *p else { continue };
            let pt = points.points.get(p).ok_or_else(|| {
                Error::Integrity(format!(
                    "view {} cell {cell} maps to point {p}, cloud has {}",
                    map.view(),
                    points.len()
                ))
            })?;
            out_points.push(*pt);
            features.extend_from_slice(grid.cell(cell));
            views.push(map.view());
        }
    }
    SemanticCloud::new(out_points, features, c, views)
}

pub type VoxelIndex = [i64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    /// Mean of member features, re-normalized to unit length.
    pub feature: Vec<f32>,
    pub count: usize,
    /// Mean member position.
    pub centroid: [f64; 3],
}

/// Voxel-downsampled semantic map keyed by `floor(p / voxel_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f64,
    channels: usize,
    cells: BTreeMap<VoxelIndex, Voxel>,
}

impl VoxelGrid {
    pub fn from_cells(voxel_size: f64, channels: usize, cells: BTreeMap<VoxelIndex, Voxel>) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::validation(format!("voxel size {voxel_size} must be positive")));
        }
        if let Some((k, _)) = cells.iter().find(|(_, v)| v.feature.len() != channels) {
            return Err(Error::validation(format!(
                "voxel {k:?} feature length differs from {channels}"
            )));
        }
        Ok(Self {
            voxel_size,
            channels,
            cells,
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> &BTreeMap<VoxelIndex, Voxel> {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.cells.values().map(|v| v.count).sum()
    }
}

pub fn voxel_index(p: &Point3<f64>, v: f64) -> VoxelIndex {
    [
        (p.x / v).floor() as i64,
        (p.y / v).floor() as i64,
        (p.z / v).floor() as i64,
    ]
}

/// Total order over cloud rows, used to sum voxel members in a canonical
/// order so the result does not depend on input row order.
fn row_order(cloud: &SemanticCloud, a: usize, b: usize) -> std::cmp::Ordering {
    let (pa, pb) = (&cloud.points[a], &cloud.points[b]);
    pa.x.total_cmp(&pb.x)
        .then(pa.y.total_cmp(&pb.y))
        .then(pa.z.total_cmp(&pb.z))
        .then_with(|| {
            cloud
                .feature(a)
                .iter()
                .zip(cloud.feature(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

pub fn voxel_downsample(cloud: &SemanticCloud, v: f64) -> Result<VoxelGrid> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::validation(format!("voxel size {v} must be positive")));
    }
    let mut groups: BTreeMap<VoxelIndex, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        groups.entry(voxel_index(p, v)).or_default().push(i);
    }
    let c = cloud.channels;
    let cells: BTreeMap<VoxelIndex, Voxel> = groups
        .into_par_iter()
        .map(|(key, mut members)| {
            members.sort_by(|&a, &b| row_order(cloud, a, b));
            let mut feat = vec![0.0f64; c];
            let mut pos = [0.0f64; 3];
            for &i in &members {
                for (s, &x) in feat.iter_mut().zip(cloud.feature(i)) {
                    *s += f64::from(x);
                }
                let p = &cloud.points[i];
                pos[0] += p.x;
                pos[1] += p.y;
                pos[2] += p.z;
            }
            let n = members.len() as f64;
            let mut feature: Vec<f32> = feat.iter().map(|s| (s / n) as f32).collect();
            normalize_in_place(&mut feature);
            let voxel = Voxel {
                feature,
                count: members.len(),
                centroid: [pos[0] / n, pos[1] / n, pos[2] / n],
            };
            (key, voxel)
        })
        .collect();
    VoxelGrid::from_cells(v, c, cells)
}

/// Per-voxel prompt response, in the grid's index order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub indices: Vec<VoxelIndex>,
    /// Positive-minus-negative similarity before rescaling.
    pub raw: Vec<f32>,
    /// Min-max rescaled to `[0, 1]` over the grid.
    pub similarity: Vec<f32>,
    pub labels: Vec<bool>,
}

impl QueryResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn query_grid(grid: &VoxelGrid, prompts: &PromptSet, tau: f32) -> Result<QueryResult> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!("threshold {tau} outside [0, 1]")));
    }
    if !grid.is_empty() && grid.channels != prompts.dim() {
        return Err(Error::validation(format!(
            "grid features have {} channels, prompts {}",
            grid.channels,
            prompts.dim()
        )));
    }
    let indices: Vec<VoxelIndex> = grid.cells.keys().copied().collect();
    let raw: Vec<f32> = grid
        .cells
        .values()
        .map(|v| prompts.combined_score(&v.feature) as f32)
        .collect();
    let similarity = minmax_normalize(&raw);
    let labels = similarity.iter().map(|&s| s >= tau).collect();
    Ok(QueryResult {
        indices,
        raw,
        similarity,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{normalize_pooled, TextEmbedding};
    use crate::clustering::MaskSet;
    use crate::geometry::Pose;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<[f64; 3]>, features: Vec<Vec<f32>>) -> SemanticCloud {
        let c = features[0].len();
        let n = points.len();
        SemanticCloud::new(
            points.into_iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
            features.into_iter().flatten().collect(),
            c,
            vec![0; n],
        )
        .unwrap()
    }

    fn pooled(d: usize, c: usize, data: Vec<f32>, view: usize) -> PooledGrid {
        let grid = TokenGrid::new(d, c, data).unwrap();
        let masks = MaskSet::from_labels(d * d, view + 1, d, (0..(view + 1) * d * d).map(|i| i % (d * d)).collect()).unwrap();
        normalize_pooled(&crate::alignment::masked_average_pool(&grid, &masks, view).unwrap())
    }

    fn emb(name: &str, v: Vec<f32>) -> TextEmbedding {
        TextEmbedding::new(name, v).unwrap()
    }

    #[test]
    fn spatial_shape_and_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let grid = TokenGrid::new(d, 4, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let local: Vec<Point3<f64>> = (0..9)
            .map(|_| Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(0.0..50.0), rng.gen_range(1.0..2.0)))
            .collect();
        let mut global = GlobalPoints::default();
        let map = global.push_view(0, &local, PatchPointMap::new(0, (0..9).map(Some).collect()), &Pose::identity());
        let s = build_spatial_features(&[grid], &global, &[map]).unwrap();
        assert_eq!((s.rows(), s.matrix().cols()), (9, 7));
        for a in 4..7 {
            let col: Vec<f64> = s.matrix().iter_rows().map(|r| r[a] as f64).collect();
            let mean = col.iter().sum::<f64>() / 9.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn spatial_identical_features_differ_by_position() {
        let grid = TokenGrid::new(1, 2, vec![0.6, 0.8]).unwrap();
        let mut global = GlobalPoints::default();
        let m0 = global.push_view(0, &[Point3::new(0.0, 0.0, 1.0)], PatchPointMap::new(0, vec![Some(0)]), &Pose::identity());
        let m1 = global.push_view(1, &[Point3::new(90.0, 0.0, 1.0)], PatchPointMap::new(0, vec![Some(0)]), &Pose::identity());
        let s = build_spatial_features(&[grid.clone(), grid], &global, &[m0, m1]).unwrap();
        let (a, b) = (s.matrix().row(0), s.matrix().row(1));
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn spatial_without_geometry_fails() {
        let grid = TokenGrid::new(1, 1, vec![1.0]).unwrap();
        let r = build_spatial_features(&[grid], &GlobalPoints::default(), &[PatchPointMap::new(0, vec![None])]);
        assert!(matches!(r, Err(Error::EmptyGeometry(_))));
    }

    #[test]
    fn projection_single_cell_and_disjoint_views() {
        let p0 = pooled(2, 2, vec![1.0, 0.0, 0.0, 1.0, 3.0, 4.0, 1.0, 1.0], 0);
        let mut global = GlobalPoints::default();
        let m0 = global.push_view(0, &[Point3::new(1.0, 2.0, 3.0)], PatchPointMap::new(0, vec![None, None, Some(0), None]), &Pose::identity());
        let c = project_pooled_to_points(std::slice::from_ref(&p0), &global, std::slice::from_ref(&m0)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.feature(0), &[0.6, 0.8]);
        assert_eq!(c.points()[0], Point3::new(1.0, 2.0, 3.0));

        let p1 = pooled(2, 2, vec![1.0; 8], 1);
        let m1 = global.push_view(
            1,
            &[Point3::new(9.0, 9.0, 9.0), Point3::new(8.0, 8.0, 8.0)],
            PatchPointMap::new(0, vec![Some(0), None, None, Some(1)]),
            &Pose::identity(),
        );
        let both = project_pooled_to_points(&[p0, p1], &global, &[m0, m1]).unwrap();
        assert_eq!(both.len(), 3);
        assert_eq!(both.view_of_point(), &[0, 1, 1]);
    }

    #[test]
    fn projection_index_out_of_range() {
        let p = pooled(1, 2, vec![1.0, 0.0], 0);
        let r = project_pooled_to_points(&[p], &GlobalPoints::default(), &[PatchPointMap::new(0, vec![Some(3)])]);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn floor_grouping_and_negative_indices() {
        let c = cloud(
            vec![[0.1, 0.0, 0.0], [0.4, 0.0, 0.0], [-0.1, 0.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        );
        let g = voxel_downsample(&c, 0.5).unwrap();
        assert_eq!(g.len(), 2);
        let zero = &g.cells()[&[0, 0, 0]];
        assert_eq!(zero.count, 2);
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((zero.feature[0] - h).abs() < 1e-6 && (zero.feature[1] - h).abs() < 1e-6);
        assert!((zero.centroid[0] - 0.25).abs() < 1e-12);
        assert_eq!(g.cells()[&[-1, 0, 0]].count, 1);
        assert_eq!(voxel_index(&Point3::new(-0.1, 0.0, 0.0), 0.5), [-1, 0, 0]);
    }

    #[test]
    fn voxel_size_must_be_positive() {
        let c = cloud(vec![[0.0; 3]], vec![vec![1.0]]);
        assert!(voxel_downsample(&c, 0.0).is_err());
        assert!(voxel_downsample(&c, -1.0).is_err());
    }

    #[test]
    fn query_single_voxel_is_half() {
        let c = cloud(vec![[0.0; 3]], vec![vec![1.0, 0.0]]);
        let g = voxel_downsample(&c, 0.5).unwrap();
        let prompts = PromptSet::new(vec![emb("road", vec![1.0, 0.0])], vec![]).unwrap();
        let q = query_grid(&g, &prompts, 0.5).unwrap();
        assert_eq!(q.similarity, vec![0.5]);
        assert_eq!(q.labels, vec![true]);
    }

    #[test]
    fn query_positive_and_negative_voxels() {
        let c = cloud(vec![[0.0; 3], [5.0, 0.0, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = voxel_downsample(&c, 0.5).unwrap();
        let prompts = PromptSet::new(vec![emb("road", vec![1.0, 0.0])], vec![emb("sky", vec![0.0, 1.0])]).unwrap();
        let q = query_grid(&g, &prompts, 0.5).unwrap();
        assert_eq!(q.labels, vec![true, false]);
        assert_eq!(q.raw, vec![1.0, -1.0]);
    }

    #[test]
    fn query_empty_grid_and_dim_mismatch() {
        let g = VoxelGrid::from_cells(0.5, 2, BTreeMap::new()).unwrap();
        let prompts = PromptSet::new(vec![emb("a", vec![1.0, 0.0, 0.0])], vec![]).unwrap();
        assert!(query_grid(&g, &prompts, 0.5).unwrap().is_empty());
        let c = cloud(vec![[0.0; 3]], vec![vec![1.0, 0.0]]);
        let g = voxel_downsample(&c, 0.5).unwrap();
        assert!(query_grid(&g, &prompts, 0.5).is_err());
    }

    #[test]
    fn uniform_features_give_uniform_similarity() {
        let c = cloud(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![vec![0.0, 1.0]; 3],
        );
        let g = voxel_downsample(&c, 0.5).unwrap();
        let prompts = PromptSet::new(vec![emb("p", vec![0.0, 1.0])], vec![]).unwrap();
        let q = query_grid(&g, &prompts, 0.5).unwrap();
        assert!(q.similarity.iter().all(|&s| s == 0.5));
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, c: usize) -> SemanticCloud {
        let points = (0..n)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let features = (0..n)
            .map(|_| {
                let mut f: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize_in_place(&mut f);
                f
            })
            .collect();
        cloud(points, features)
    }

    proptest! {
        #[test]
        fn voxelization_is_order_invariant_and_conserves_points(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 200, 4);
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.shuffle(&mut rng);
            let shuffled = SemanticCloud::new(
                idx.iter().map(|&i| c.points()[i]).collect(),
                idx.iter().flat_map(|&i| c.feature(i).to_vec()).collect(),
                4,
                vec![0; 200],
            ).unwrap();
            let a = voxel_downsample(&c, 0.7).unwrap();
            prop_assert_eq!(&a, &voxel_downsample(&shuffled, 0.7).unwrap());
            prop_assert_eq!(a.total_points(), 200);
        }

        #[test]
        fn tiny_voxels_hold_single_points(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 50, 3);
            let mut min_d = f64::INFINITY;
            for i in 0..50 {
                for j in 0..i {
                    min_d = min_d.min((c.points()[i] - c.points()[j]).norm());
                }
            }
            let g = voxel_downsample(&c, min_d / 2.0).unwrap();
            prop_assert_eq!(g.len(), 50);
            for v in g.cells().values() {
                prop_assert_eq!(v.count, 1);
            }
        }
    }
}
