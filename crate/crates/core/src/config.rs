//! Pipeline parameters: named presets, overrides from a manifest or the
//! command line, and the resolved configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::KMeansParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// d=16, k=4, c_r=4
    Small,
    /// d=32, k=4, c_r=4
    Large,
    /// d=64, k=12, c_r=24, 0.5 m voxels, depth capped at 150 m,
    /// clustering on features plus world coordinates
    Spatial,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "large" => Ok(Preset::Large),
            "spatial" => Ok(Preset::Spatial),
            _ => Err(Error::validation(format!(
                "unknown preset {s:?} (expected small, large or spatial)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Small => "small",
            Preset::Large => "large",
            Preset::Spatial => "spatial",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    /// Side length of the shared token grid.
    pub d: usize,
    pub k: usize,
    pub c_r: usize,
    /// Voxel edge length in metres.
    pub voxel: f64,
    pub tau: f32,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Positive depths inside `[depth_min, depth_max]` are used.
    pub depth_min: f32,
    pub depth_max: f32,
    /// Cluster on vision features concatenated with world coordinates.
    pub spatial: bool,
    /// External refiner command; `None` thresholds directly.
    pub refiner: Option<String>,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            d: 16,
            k: 4,
            c_r: 4,
            voxel: 0.5,
            tau: 0.5,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
            depth_min: 0.0,
            depth_max: f32::INFINITY,
            spatial: false,
            refiner: None,
        };
        match preset {
            Preset::Small => base,
            Preset::Large => Self { d: 32, ..base },
            Preset::Spatial => Self {
                d: 64,
                k: 12,
                c_r: 24,
                depth_max: 150.0,
                spatial: true,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::validation("d must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if self.c_r == 0 {
            return Err(Error::validation("c_r must be at least 1"));
        }
        if !(self.voxel > 0.0 && self.voxel.is_finite()) {
            return Err(Error::validation(format!("voxel size {} must be positive", self.voxel)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::validation(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::validation(format!("tol {} must be non-negative", self.tol)));
        }
        if !(self.depth_min >= 0.0 && self.depth_min <= self.depth_max) {
            return Err(Error::validation(format!(
                "depth range [{}, {}] is empty",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }

    pub fn kmeans(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            seed: self.seed,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }

    /// Layer `overrides` in order over the chosen preset. The preset is the
    /// last one named by any override, else `default`.
    pub fn resolve(default: Preset, overrides: &[&Overrides]) -> Result<Self> {
        let preset = overrides
            .iter()
            .rev()
            .find_map(|o| o.preset)
            .unwrap_or(default);
        let mut cfg = Self::preset(preset);
        for o in overrides {
            o.apply(&mut cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optional parameter values, as written in a manifest `[params]` table or
/// given as flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub c_r: Option<usize>,
    pub voxel: Option<f64>,
    pub tau: Option<f32>,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub depth_min: Option<f32>,
    pub depth_max: Option<f32>,
    pub spatial: Option<bool>,
    pub refiner: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )*};
        }
        set!(d, k, c_r, voxel, tau, seed, max_iters, tol, depth_min, depth_max, spatial);
        if let Some(r) = &self.refiner {
            cfg.refiner = Some(r.clone());
        }
    }
}
