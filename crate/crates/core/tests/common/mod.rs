//! Synthetic scenes with known ground truth, written to disk in the formats
//! the command-line tool reads.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokalign::io::manifest::{FrameSpec, IntrinsicsSpec, ManifestFile, PromptTable};
use tokalign::io::otf::write_otf;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_tokalign"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("tool starts")
}

pub fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() as f32;
    v.into_iter().map(|x| x / n).collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            // Box-Muller
            let (a, b): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            ((-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()) as f32
        })
        .collect()
}

/// `count` orthonormal vectors in `dim` dimensions.
pub fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < count {
        let mut v: Vec<f64> = gaussian(rng, dim).into_iter().map(f64::from).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out.into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

pub const D2: usize = 16;
/// Image side; `(SIDE - 1)` is a multiple of `D2 - 1`, so every grid cell
/// lands on a pixel under align-corners upsampling.
pub const SIDE: usize = 46;
pub const POSITIVE: [&str; 3] = ["gravel", "road", "dirt"];
pub const NEGATIVE: [&str; 3] = ["sky", "grass", "forest"];

/// Region of grid cell `(r, c)`: 0 is a band over the bottom six rows (the
/// prompt target), 1..=3 split the rest into vertical strips.
pub fn region(r: usize, c: usize) -> usize {
    if r >= 10 {
        0
    } else if c < 5 {
        1
    } else if c < 11 {
        2
    } else {
        3
    }
}

pub struct Scene2d {
    pub manifest: PathBuf,
    pub gt_mask: PathBuf,
    /// Ground-truth region of every grid cell, row-major.
    pub gt_labels: Vec<usize>,
    /// Largest noise norm relative to the smallest prototype separation.
    pub separation_ratio: f64,
}

/// Four well-separated vision prototypes with small noise, vision-language
/// tokens drawn from matching orthonormal prototypes, and prompts aligned
/// with those prototypes: the three positives with region 0, the three
/// negatives with regions 1, 2 and 3.
pub fn write_scene_2d(dir: &Path, seed: u64) -> Scene2d {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cv, cvl, noise) = (32, 24, 0.01f32);
    let vproto: Vec<Vec<f32>> = (0..4).map(|_| unit(gaussian(&mut rng, cv))).collect();
    let lproto = orthonormal(&mut rng, 4, cvl);

    let mut min_sep = f64::INFINITY;
    for i in 0..4 {
        for j in 0..i {
            let d: f64 = vproto[i]
                .iter()
                .zip(&vproto[j])
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            min_sep = min_sep.min(d);
        }
    }
    let max_noise = f64::from(noise) * (cv as f64).sqrt();

    let gt_labels: Vec<usize> = (0..D2 * D2).map(|i| region(i / D2, i % D2)).collect();
    let mut vision = Vec::with_capacity(D2 * D2 * cv);
    let mut vl = Vec::with_capacity(D2 * D2 * cvl);
    for &g in &gt_labels {
        vision.extend(vproto[g].iter().map(|x| x + rng.gen_range(-noise..noise)));
        vl.extend(lproto[g].iter().map(|x| x + rng.gen_range(-noise..noise)));
    }
    write_otf(dir.join("vision.otf"), &[D2, D2, cv], &vision).unwrap();
    write_otf(dir.join("vl.otf"), &[D2, D2, cvl], &vl).unwrap();

    std::fs::create_dir_all(dir.join("text")).unwrap();
    let mut prompts = PromptTable::default();
    for name in POSITIVE {
        let v: Vec<f32> = lproto[0].iter().map(|x| x + rng.gen_range(-noise..noise)).collect();
        let rel = PathBuf::from(format!("text/{name}.otf"));
        write_otf(dir.join(&rel), &[cvl], &unit(v)).unwrap();
        prompts.positive.insert(name.to_string(), rel);
    }
    for (i, name) in NEGATIVE.iter().enumerate() {
        let rel = PathBuf::from(format!("text/{name}.otf"));
        write_otf(dir.join(&rel), &[cvl], &lproto[i + 1]).unwrap();
        prompts.negative.insert(name.to_string(), rel);
    }

    // pixel -> nearest grid cell under align-corners sampling
    let cell_of = |p: usize| (p * (D2 - 1) + (SIDE - 1) / 2) / (SIDE - 1);
    let colors = [[120, 110, 90], [90, 160, 230], [60, 170, 60], [20, 90, 30]];
    let img = RgbImage::from_fn(SIDE as u32, SIDE as u32, |x, y| {
        Rgb(colors[region(cell_of(y as usize), cell_of(x as usize))])
    });
    img.save(dir.join("image.png")).unwrap();
    let gt = GrayImage::from_fn(SIDE as u32, SIDE as u32, |x, y| {
        Luma([if region(cell_of(y as usize), cell_of(x as usize)) == 0 { 255 } else { 0 }])
    });
    let gt_mask = dir.join("gt.png");
    gt.save(&gt_mask).unwrap();

    let manifest = ManifestFile {
        params: Default::default(),
        prompts,
        frames: vec![FrameSpec {
            image: Some("image.png".into()),
            vision_tokens: "vision.otf".into(),
            vl_tokens: "vl.otf".into(),
            depth: None,
            pose: None,
            intrinsics: None,
            gt_mask: Some("gt.png".into()),
        }],
    };
    let path = dir.join("scene.toml");
    manifest.write(&path).unwrap();
    Scene2d {
        manifest: path,
        gt_mask,
        gt_labels,
        separation_ratio: max_noise / min_sep,
    }
}

pub const D3: usize = 8;
pub const DEPTH_SIDE: usize = 32;

pub fn row_major(m: &nalgebra::Matrix4<f64>) -> Vec<f64> {
    (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect()
}

/// Multi-view scene: a wall (upper image half) and a floor (lower half)
/// seen by cameras translated along x. `skip_frame` appends a frame
/// without depth.
pub fn write_scene_3d(dir: &Path, seed: u64, poses: &[nalgebra::Matrix4<f64>], skip_frame: bool) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cv, cvl) = (16, 12);
    let vproto: Vec<Vec<f32>> = (0..2).map(|_| unit(gaussian(&mut rng, cv))).collect();
    let lproto = orthonormal(&mut rng, 2, cvl);
    let k = IntrinsicsSpec { fx: 32.0, fy: 32.0, cx: 16.0, cy: 16.0 };
    let mut frames = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let mut depth = Vec::with_capacity(DEPTH_SIDE * DEPTH_SIDE);
        for r in 0..DEPTH_SIDE {
            for c in 0..DEPTH_SIDE {
                let z = if r < DEPTH_SIDE / 2 { 4.0 } else { 4.0 - 1.5 * (r - DEPTH_SIDE / 2) as f32 / 16.0 };
                // sprinkle invalid readings
                let z = if (r * 7 + c * 3 + i) % 29 == 0 { 0.0 } else { z + rng.gen_range(-0.01..0.01) };
                depth.push(z);
            }
        }
        let mut vision = Vec::new();
        let mut vl = Vec::new();
        for r in 0..D3 {
            for _ in 0..D3 {
                let g = usize::from(r >= D3 / 2);
                vision.extend(vproto[g].iter().map(|x| x + rng.gen_range(-0.02..0.02)));
                vl.extend(lproto[g].iter().map(|x| x + rng.gen_range(-0.02..0.02)));
            }
        }
        write_otf(dir.join(format!("depth{i}.otf")), &[DEPTH_SIDE, DEPTH_SIDE], &depth).unwrap();
        write_otf(dir.join(format!("vision{i}.otf")), &[D3, D3, cv], &vision).unwrap();
        write_otf(dir.join(format!("vl{i}.otf")), &[D3, D3, cvl], &vl).unwrap();
        frames.push(FrameSpec {
            image: None,
            vision_tokens: format!("vision{i}.otf").into(),
            vl_tokens: format!("vl{i}.otf").into(),
            depth: Some(format!("depth{i}.otf").into()),
            pose: Some(row_major(pose)),
            intrinsics: Some(k),
            gt_mask: None,
        });
    }
    if skip_frame {
        let mut f = frames[0].clone();
        f.depth = None;
        frames.push(f);
    }
    let mut prompts = PromptTable::default();
    write_otf(dir.join("floor.otf"), &[cvl], &lproto[1]).unwrap();
    write_otf(dir.join("wall.otf"), &[cvl], &lproto[0]).unwrap();
    prompts.positive.insert("floor".into(), "floor.otf".into());
    prompts.negative.insert("wall".into(), "wall.otf".into());
    let manifest = ManifestFile {
        params: tokalign::config::Overrides {
            d: Some(D3),
            k: Some(2),
            c_r: Some(2),
            voxel: Some(0.5),
            ..Default::default()
        },
        prompts,
        frames,
    };
    let path = dir.join("scene.toml");
    manifest.write(&path).unwrap();
    path
}

pub fn translation(x: f64, y: f64, z: f64) -> nalgebra::Matrix4<f64> {
    nalgebra::Matrix4::new_translation(&nalgebra::Vector3::new(x, y, z))
}

/// Every regular file under `dir`, relative path and contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
