//! On-disk voxel grid: a feature tensor, a voxel table and a small JSON
//! header, all sharing one path stem.
//!
//! For stem `out/grid`:
//!
//! * `out/grid_features.otf`: `M x C` unit feature vectors
//! * `out/grid_voxels.otf`: `M x 7` rows `ix, iy, iz, count, cx, cy, cz`
//! * `out/grid.json`: voxel size, channel count, voxel and point totals
//!
//! Rows are in ascending voxel index order. Indices and counts are stored as
//! float32, so they must stay within `±2^24`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::otf;
use crate::error::{Error, Result};
use crate::fusion::{Voxel, VoxelGrid};

const EXACT_F32_INT: i64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub voxel_size: f64,
    pub channels: usize,
    pub voxels: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridPaths {
    pub features: PathBuf,
    pub voxels: PathBuf,
    pub header: PathBuf,
}

impl GridPaths {
    pub fn from_stem(stem: impl AsRef<Path>) -> Self {
        let stem = stem.as_ref();
        let with = |suffix: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            features: with("_features.otf"),
            voxels: with("_voxels.otf"),
            header: with(".json"),
        }
    }
}

pub fn write_grid(stem: impl AsRef<Path>, grid: &VoxelGrid) -> Result<GridPaths> {
    let paths = GridPaths::from_stem(stem);
    let c = grid.channels();
    let mut features = Vec::with_capacity(grid.len() * c);
    let mut table = Vec::with_capacity(grid.len() * 7);
    for (idx, v) in grid.cells() {
        if idx.iter().any(|i| i.abs() > EXACT_F32_INT) || v.count as i64 > EXACT_F32_INT {
            return Err(Error::validation(format!(
                "voxel {idx:?} with {} points is outside the storable range",
                v.count
            )));
        }
        features.extend_from_slice(&v.feature);
        table.extend(idx.iter().map(|&i| i as f32));
        table.push(v.count as f32);
        table.extend(v.centroid.iter().map(|&x| x as f32));
    }
    otf::write_otf(&paths.features, &[grid.len(), c], &features)?;
    otf::write_otf(&paths.voxels, &[grid.len(), 7], &table)?;
    let header = GridHeader {
        voxel_size: grid.voxel_size(),
        channels: c,
        voxels: grid.len(),
        points: grid.total_points(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&paths.header, json + "\n").map_err(|e| Error::io(&paths.header, e))?;
    Ok(paths)
}

pub fn read_grid(stem: impl AsRef<Path>) -> Result<(VoxelGrid, GridHeader)> {
    let paths = GridPaths::from_stem(stem);
    let text = std::fs::read_to_string(&paths.header).map_err(|e| Error::io(&paths.header, e))?;
    let header: GridHeader = serde_json::from_str(&text).map_err(|e| {
        Error::format(0, format!("{}: {e}", paths.header.display()))
    })?;
    let features = otf::read_otf(&paths.features)?;
    let table = otf::read_otf(&paths.voxels)?;
    if features.shape != [header.voxels, header.channels] {
        return Err(Error::Integrity(format!(
            "feature tensor shape {:?} disagrees with header ({} x {})",
            features.shape, header.voxels, header.channels
        )));
    }
    if table.shape != [header.voxels, 7] {
        return Err(Error::Integrity(format!(
            "voxel table shape {:?} disagrees with header ({} x 7)",
            table.shape, header.voxels
        )));
    }
    let mut cells = BTreeMap::new();
    for (i, row) in table.data.chunks_exact(7).enumerate() {
        let idx = [row[0] as i64, row[1] as i64, row[2] as i64];
        let feature = features.data[i * header.channels..(i + 1) * header.channels].to_vec();
        let voxel = Voxel {
            feature,
            count: row[3] as usize,
            centroid: [f64::from(row[4]), f64::from(row[5]), f64::from(row[6])],
        };
        if cells.insert(idx, voxel).is_some() {
            return Err(Error::Integrity(format!("voxel {idx:?} listed twice")));
        }
    }
    let grid = VoxelGrid::from_cells(header.voxel_size, header.channels, cells)?;
    if grid.total_points() != header.points {
        return Err(Error::Integrity(format!(
            "voxel counts sum to {}, header says {}",
            grid.total_points(),
            header.points
        )));
    }
    Ok((grid, header))
}
