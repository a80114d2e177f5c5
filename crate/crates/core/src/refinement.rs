//! Coarse-to-fine mask production: bilinear upsampling of a normalized
//! similarity map to image resolution followed by thresholding, or delegation
//! to an external refiner.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::alignment::SimilarityMap;
use crate::error::{Error, Result};
use crate::io::{otf, png};
use crate::tensor::{resample_bilinear, FeatureMap};

/// A pixel-resolution binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::validation(format!(
                "mask {height}x{width} needs {} values, got {}",
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// The image a mask is produced for. Pixels are only read by external hooks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
}

impl ImageRef {
    pub fn new(path: impl Into<PathBuf>, height: usize, width: usize) -> Self {
        Self {
            path: path.into(),
            height,
            width,
        }
    }

    /// Read the dimensions from the image file header.
    pub fn probe(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
        Ok(Self::new(path, h as usize, w as usize))
    }
}

/// An external mask refiner. Receives the image and the similarity map
/// upsampled to image resolution; must return a mask of the image's size.
///
/// Calls take `&mut self`, so one hook instance is never entered concurrently.
pub trait RefinerHook {
    fn identifier(&self) -> &str;

    fn refine(&mut self, image: &ImageRef, similarity: &FeatureMap) -> std::result::Result<BinaryMask, String>;
}

/// Runs a refiner program as a subprocess:
///
/// ```text
/// <program> [args..] <image path> <similarity.otf> <mask.png>
/// ```
///
/// The similarity file is a 2-D `H x W` tensor file with values in `[0, 1]`.
/// The program must exit with status 0 after writing an `H x W` PNG mask at
/// the third path; any non-zero pixel counts as foreground.
#[derive(Debug, Clone)]
pub struct SubprocessRefiner {
    identifier: String,
    program: PathBuf,
    args: Vec<String>,
    scratch: PathBuf,
}

impl SubprocessRefiner {
    /// `command` is split on whitespace: program followed by fixed arguments.
    pub fn new(command: &str, scratch: impl Into<PathBuf>) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::validation("refiner command is empty"))?;
        Ok(Self {
            identifier: command.to_string(),
            program: PathBuf::from(program),
            args: parts.map(str::to_string).collect(),
            scratch: scratch.into(),
        })
    }

    fn run(&self, image: &ImageRef, similarity: &FeatureMap) -> std::result::Result<BinaryMask, String> {
        std::fs::create_dir_all(&self.scratch).map_err(|e| e.to_string())?;
        let sim_path = self.scratch.join("refiner_similarity.otf");
        let mask_path = self.scratch.join("refiner_mask.png");
        otf::write_otf(
            &sim_path,
            &[similarity.height(), similarity.width()],
            similarity.data(),
        )
        .map_err(|e| e.to_string())?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&image.path)
            .arg(&sim_path)
            .arg(&mask_path)
            .status()
            .map_err(|e| format!("cannot start {}: {e}", self.program.display()))?;
        if !status.success() {
            return Err(format!("exited with {status}"));
        }
        let mask = png::read_mask(&mask_path).map_err(|e| e.to_string())?;
        let _ = std::fs::remove_file(&sim_path);
        let _ = std::fs::remove_file(&mask_path);
        Ok(mask)
    }

    pub fn scratch(&self) -> &Path {
        &self.scratch
    }
}

impl RefinerHook for SubprocessRefiner {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn refine(&mut self, image: &ImageRef, similarity: &FeatureMap) -> std::result::Result<BinaryMask, String> {
        self.run(image, similarity)
    }
}

/// Bilinear (align-corners) upsampling of a normalized map to `height x width`.
pub fn upsample_similarity(s: &SimilarityMap, height: usize, width: usize) -> Result<FeatureMap> {
    if !s.is_normalized() {
        return Err(Error::validation("similarity map must be normalized before upsampling"));
    }
    if height == 0 || width == 0 {
        return Err(Error::validation("upsampling target must be non-zero"));
    }
    let src = FeatureMap::new(s.d(), s.d(), 1, s.data().to_vec())?;
    resample_bilinear(&src, height, width)
}

/// Foreground where `value >= tau`.
pub fn threshold_mask(values: &FeatureMap, tau: f32) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!("threshold {tau} outside [0, 1]")));
    }
    if values.channels() != 1 {
        return Err(Error::validation("threshold expects a single-channel map"));
    }
    BinaryMask::new(
        values.height(),
        values.width(),
        values.data().iter().map(|&v| v >= tau).collect(),
    )
}

/// Threshold a `d x d` similarity map without upsampling.
pub fn threshold_similarity(s: &SimilarityMap, tau: f32) -> Result<BinaryMask> {
    threshold_mask(&FeatureMap::new(s.d(), s.d(), 1, s.data().to_vec())?, tau)
}

/// Produce the image-resolution mask: delegate to `hook` when given,
/// otherwise upsample and threshold at `tau`. Hook failures are reported,
/// never silently replaced by the fallback.
pub fn refine(
    image: &ImageRef,
    s: &SimilarityMap,
    hook: Option<&mut dyn RefinerHook>,
    tau: f32,
) -> Result<BinaryMask> {
    let up = upsample_similarity(s, image.height, image.width)?;
    match hook {
        None => threshold_mask(&up, tau),
        Some(hook) => {
            let mask = hook.refine(image, &up).map_err(|message| Error::Refiner {
                hook: hook.identifier().to_string(),
                message,
            })?;
            if mask.height() != image.height || mask.width() != image.width {
                return Err(Error::Refiner {
                    hook: hook.identifier().to_string(),
                    message: format!(
                        "returned a {}x{} mask for a {}x{} image",
                        mask.height(),
                        mask.width(),
                        image.height,
                        image.width
                    ),
                });
            }
            Ok(mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::normalize_similarity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normalized(d: usize, data: Vec<f32>) -> SimilarityMap {
        SimilarityMap::new(d, data, true).unwrap()
    }

    struct ThresholdHook(f32);

    impl RefinerHook for ThresholdHook {
        fn identifier(&self) -> &str {
            "threshold"
        }
        fn refine(&mut self, _: &ImageRef, s: &FeatureMap) -> std::result::Result<BinaryMask, String> {
            threshold_mask(s, self.0).map_err(|e| e.to_string())
        }
    }

    struct FailingHook;

    impl RefinerHook for FailingHook {
        fn identifier(&self) -> &str {
            "broken"
        }
        fn refine(&mut self, _: &ImageRef, _: &FeatureMap) -> std::result::Result<BinaryMask, String> {
            Err("model not loaded".into())
        }
    }

    struct WrongSizeHook;

    impl RefinerHook for WrongSizeHook {
        fn identifier(&self) -> &str {
            "tiny"
        }
        fn refine(&mut self, _: &ImageRef, _: &FeatureMap) -> std::result::Result<BinaryMask, String> {
            Ok(BinaryMask::new(1, 1, vec![true]).unwrap())
        }
    }

    #[test]
    fn constant_map_upsamples_to_constant() {
        let up = upsample_similarity(&normalized(2, vec![0.7; 4]), 13, 9).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn same_size_upsample_is_identity() {
        let s = normalized(2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(upsample_similarity(&s, 2, 2).unwrap().data(), s.data());
    }

    #[test]
    fn upsample_rejects_raw_maps_and_zero_sizes() {
        let raw = SimilarityMap::new(1, vec![3.0], false).unwrap();
        assert!(upsample_similarity(&raw, 4, 4).is_err());
        assert!(upsample_similarity(&normalized(1, vec![0.3]), 0, 4).is_err());
    }

    #[test]
    fn inclusive_threshold() {
        let m = FeatureMap::new(1, 3, 1, vec![0.49, 0.5, 0.51]).unwrap();
        assert_eq!(threshold_mask(&m, 0.5).unwrap().data(), &[false, true, true]);
        let low = FeatureMap::new(1, 2, 1, vec![0.1, 0.2]).unwrap();
        assert_eq!(threshold_mask(&low, 0.5).unwrap().count_ones(), 0);
        assert!(threshold_mask(&m, 1.5).is_err());
        assert!(threshold_mask(&m, -0.1).is_err());
    }

    #[test]
    fn no_hook_constant_high_map() {
        let image = ImageRef::new("unused.png", 20, 30);
        let mask = refine(&image, &normalized(16, vec![0.9; 256]), None, 0.5).unwrap();
        assert_eq!((mask.height(), mask.width()), (20, 30));
        assert_eq!(mask.count_ones(), 600);
    }

    #[test]
    fn identity_hook_matches_no_hook_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = normalize_similarity(
            &SimilarityMap::new(16, (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect(), false).unwrap(),
        );
        let image = ImageRef::new("unused.png", 64, 48);
        let plain = refine(&image, &s, None, 0.5).unwrap();
        let mut hook = ThresholdHook(0.5);
        let hooked = refine(&image, &s, Some(&mut hook), 0.5).unwrap();
        assert_eq!(plain, hooked);
    }

    #[test]
    fn hook_failure_names_the_hook() {
        let image = ImageRef::new("unused.png", 4, 4);
        let s = normalized(2, vec![0.5; 4]);
        match refine(&image, &s, Some(&mut FailingHook), 0.5) {
            Err(Error::Refiner { hook, .. }) => assert_eq!(hook, "broken"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            refine(&image, &s, Some(&mut WrongSizeHook), 0.5),
            Err(Error::Refiner { .. })
        ));
    }

    proptest! {
        #[test]
        fn raising_tau_never_adds_pixels(seed in 0u64..200, t1 in 0.0f32..=1.0, t2 in 0.0f32..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = normalize_similarity(
                &SimilarityMap::new(4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), false).unwrap(),
            );
            let image = ImageRef::new("unused.png", 17, 11);
            let a = refine(&image, &s, None, lo).unwrap();
            let b = refine(&image, &s, None, hi).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(*x || !*y);
            }
        }
    }
}
