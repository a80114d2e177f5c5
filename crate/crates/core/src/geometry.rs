//! Pinhole camera geometry linking token cells to 3D points.
//!
//! Pixel `(row, col)` covers the continuous square `[col, col + 1) x
//! [row, row + 1)`, so its centre sits at `(col + 0.5, row + 0.5)`. Intrinsics
//! are expressed in these continuous coordinates.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::validation(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Camera-frame point at depth `z` seen through pixel coordinate `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinate of a camera-frame point with `z > 0`.
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-5) || !((det - 1.0).abs() <= 1e-5) || !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::validation(format!(
                "pose rotation is not a proper rotation (orthogonality error {ortho:.3e}, det {det:.6})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// From a row-major homogeneous 4x4 matrix.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let bottom = [m[12], m[13], m[14], m[15]];
        let expected = [0.0, 0.0, 0.0, 1.0];
        if bottom.iter().zip(expected).any(|(a, b)| !((a - b).abs() <= 1e-6)) {
            return Err(Error::validation(format!(
                "pose bottom row {bottom:?} is not (0, 0, 0, 1)"
            )));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(r, Vector3::new(m[3], m[7], m[11]))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }
}

/// `H x W` metric depth, row-major. Non-finite values mark missing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::validation(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    /// Inclusive metric range of usable depth.
    pub valid_range: (f32, f32),
}

impl CameraFrame {
    pub fn new(depth: DepthMap, intrinsics: Intrinsics, pose: Pose, valid_range: (f32, f32)) -> Result<Self> {
        let (lo, hi) = valid_range;
        if !(lo >= 0.0) || hi.is_nan() || hi < lo {
            return Err(Error::validation(format!(
                "depth range ({lo}, {hi}) is invalid"
            )));
        }
        Ok(Self {
            depth,
            intrinsics,
            pose,
            valid_range,
        })
    }

    fn usable(&self, z: f32) -> bool {
        z.is_finite() && z > 0.0 && z >= self.valid_range.0 && z <= self.valid_range.1
    }
}

/// Split `len` pixels into `d` contiguous tiles; the first `len % d` tiles
/// take one extra pixel. Returns `[start, end)` per tile.
pub fn tile_bounds(len: usize, d: usize) -> Vec<(usize, usize)> {
    let (base, rem) = (len / d, len % d);
    let mut start = 0;
    (0..d)
        .map(|i| {
            let end = start + base + usize::from(i < rem);
            let t = (start, end);
            start = end;
            t
        })
        .collect()
}

/// Per-cell median depth over a `d x d` tiling of the depth image.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianDepthGrid {
    d: usize,
    depths: Vec<Option<f32>>,
    /// Continuous pixel coordinate `(u, v)` of each cell centre.
    centers: Vec<(f64, f64)>,
}

impl MedianDepthGrid {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn depth(&self, cell: usize) -> Option<f32> {
        self.depths[cell]
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        self.centers[cell]
    }

    pub fn valid_cells(&self) -> usize {
        self.depths.iter().filter(|d| d.is_some()).count()
    }
}

fn median(values: &mut [f32]) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f32::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        ((f64::from(values[n / 2 - 1]) + f64::from(values[n / 2])) / 2.0) as f32
    })
}

pub fn median_depth_grid(frame: &CameraFrame, d: usize) -> Result<MedianDepthGrid> {
    let (h, w) = (frame.depth.height, frame.depth.width);
    if d == 0 || d > h.min(w) {
        return Err(Error::validation(format!(
            "grid size {d} does not fit a {h}x{w} depth image"
        )));
    }
    let rows = tile_bounds(h, d);
    let cols = tile_bounds(w, d);
    let mut depths = Vec::with_capacity(d * d);
    let mut centers = Vec::with_capacity(d * d);
    let mut buf = Vec::new();
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            buf.clear();
            for r in r0..r1 {
                buf.extend(
                    frame.depth.data[r * w + c0..r * w + c1]
                        .iter()
                        .copied()
                        .filter(|&z| frame.usable(z)),
                );
            }
            depths.push(median(&mut buf));
            centers.push(((c0 + c1) as f64 / 2.0, (r0 + r1) as f64 / 2.0));
        }
    }
    Ok(MedianDepthGrid { d, depths, centers })
}

/// Which point (if any) each token cell of one view produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPointMap {
    view: usize,
    cells: Vec<Option<usize>>,
}

impl PatchPointMap {
    pub fn new(view: usize, cells: Vec<Option<usize>>) -> Self {
        Self { view, cells }
    }

    pub fn view(&self) -> usize {
        self.view
    }

    pub fn cells(&self) -> &[Option<usize>] {
        &self.cells
    }

    pub fn point_of(&self, cell: usize) -> Option<usize> {
        self.cells[cell]
    }

    fn offset(mut self, by: usize, view: usize) -> Self {
        self.view = view;
        for c in self.cells.iter_mut().flatten() {
            *c += by;
        }
        self
    }
}

/// Lift every valid cell centre to a camera-frame point at its median depth.
pub fn backproject(grid: &MedianDepthGrid, k: &Intrinsics) -> Result<(Vec<Point3<f64>>, PatchPointMap)> {
    let mut points = Vec::with_capacity(grid.valid_cells());
    let cells = grid
        .depths
        .iter()
        .zip(&grid.centers)
        .map(|(depth, &(u, v))| {
            depth.map(|z| {
                points.push(k.unproject(u, v, f64::from(z)));
                points.len() - 1
            })
        })
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyGeometry("no cell has valid depth".into()));
    }
    Ok((points, PatchPointMap::new(0, cells)))
}

pub fn to_global(points: &[Point3<f64>], pose: &Pose) -> Vec<Point3<f64>> {
    points.iter().map(|p| pose.apply(p)).collect()
}

/// Points of all views in the world frame, tagged with their source view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalPoints {
    pub points: Vec<Point3<f64>>,
    pub view_of_point: Vec<usize>,
}

impl GlobalPoints {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Append one view's local points; returns the map re-indexed into the
    /// global point list.
    pub fn push_view(&mut self, view: usize, local: &[Point3<f64>], map: PatchPointMap, pose: &Pose) -> PatchPointMap {
        let offset = self.points.len();
        self.points.extend(to_global(local, pose));
        self.view_of_point.extend(std::iter::repeat(view).take(local.len()));
        map.offset(offset, view)
    }
}
