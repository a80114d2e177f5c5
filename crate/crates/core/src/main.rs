use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use tokalign::alignment::{PromptSet, TextEmbedding};
use tokalign::config::{Overrides, PipelineConfig, Preset};
use tokalign::error::{Error, Result};
use tokalign::evaluation::{adjusted_rand_index, confusion, metrics, project_labels_knn, Confusion, Metrics};
use tokalign::fusion::{query_grid, VoxelGrid};
use tokalign::io::grid::{read_grid, write_grid};
use tokalign::io::manifest::Manifest;
use tokalign::io::otf::{read_otf, write_otf};
use tokalign::io::ply::{write_ply, Coloring};
use tokalign::io::png::{read_mask, write_mask};
use tokalign::pipeline::{reconstruct, segment_frame, FrameData};
use tokalign::reduction::{pca_fit, pca_transform};
use tokalign::refinement::{threshold_mask, ImageRef, RefinerHook, SubprocessRefiner};
use tokalign::tensor::TokenMatrix;

#[derive(Parser)]
#[command(name = "tokalign", version, about = "Open-vocabulary segmentation and 3D semantic maps from frozen encoder tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment the single frame of a manifest into a prompt mask.
    Segment2d {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        params: ParamFlags,
        #[command(flatten)]
        prompts: PromptFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse posed RGB-D frames into a queryable voxel grid.
    Reconstruct3d {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        params: ParamFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved voxel grid against prompts.
    Query {
        /// Grid path stem, as written by reconstruct3d (e.g. `out/grid`).
        #[arg(long)]
        grid: PathBuf,
        /// Manifest used to resolve prompt names.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        prompts: PromptFlags,
        #[arg(long)]
        tau: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a prediction with ground truth.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// 2d: PNG mask. 3d: `N x 4` tensor of x, y, z, label.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Neighbours used to transfer ground-truth labels in 3d mode.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Pipeline time to record in the report.
        #[arg(long)]
        seconds: Option<f64>,
        /// Report file; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refiner that thresholds the map it is given; arguments follow the
    /// refiner protocol.
    #[command(hide = true)]
    ThresholdRefiner {
        #[arg(long, default_value_t = 0.5)]
        tau: f32,
        image: PathBuf,
        similarity: PathBuf,
        mask: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Args, Default)]
struct ParamFlags {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    cr: Option<usize>,
    #[arg(long)]
    voxel: Option<f64>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth_max: Option<f32>,
    /// Refiner command; the image, similarity and output mask paths are
    /// appended.
    #[arg(long)]
    refiner: Option<String>,
}

impl ParamFlags {
    fn overrides(&self) -> Result<Overrides> {
        Ok(Overrides {
            preset: self.preset.as_deref().map(str::parse).transpose()?,
            d: self.d,
            k: self.k,
            c_r: self.cr,
            voxel: self.voxel,
            tau: self.tau,
            seed: self.seed,
            depth_max: self.depth_max,
            refiner: self.refiner.clone(),
            ..Default::default()
        })
    }
}

#[derive(Args, Default)]
struct PromptFlags {
    /// Comma-separated prompt names from the manifest or embedding files.
    #[arg(long, value_delimiter = ',')]
    prompts_pos: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    prompts_neg: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Segment2d { manifest, params, prompts, out } => segment2d(&manifest, &params, &prompts, &out),
        Command::Reconstruct3d { manifest, params, out } => reconstruct3d(&manifest, &params, &out),
        Command::Query { grid, manifest, prompts, tau, out } => query(&grid, manifest.as_deref(), &prompts, tau, &out),
        Command::Eval { mode, pred, gt, k, seconds, out } => eval(mode, &pred, &gt, k, seconds, out.as_deref()),
        Command::ThresholdRefiner { tau, similarity, mask, .. } => {
            let map = read_otf(&similarity)?;
            if map.shape.len() != 2 {
                return Err(Error::Validation(format!("expected a 2-D map, got shape {:?}", map.shape)));
            }
            let fm = tokalign::tensor::FeatureMap::new(map.shape[0], map.shape[1], 1, map.data)?;
            write_mask(&mask, &threshold_mask(&fm, tau)?)
        }
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Resolve prompt names against the manifest; anything else is a file path.
fn load_prompts(
    flags: &PromptFlags,
    manifest: Option<&Manifest>,
) -> Result<PromptSet> {
    let lookup = |entries: &[String], fallback: Option<&[(String, PathBuf)]>| -> Result<Vec<TextEmbedding>> {
        let pairs: Vec<(String, PathBuf)> = if entries.is_empty() {
            fallback.map(<[_]>::to_vec).unwrap_or_default()
        } else {
            entries
                .iter()
                .map(|e| {
                    let path = manifest
                        .and_then(|m| m.prompt_path(e))
                        .map(Path::to_path_buf)
                        .unwrap_or_else(|| PathBuf::from(e));
                    (e.clone(), path)
                })
                .collect()
        };
        pairs
            .iter()
            .map(|(name, path)| read_otf(path)?.into_embedding(name))
            .collect()
    };
    let pos = lookup(&flags.prompts_pos, manifest.map(|m| m.positives.as_slice()))?;
    let neg = lookup(&flags.prompts_neg, manifest.map(|m| m.negatives.as_slice()))?;
    PromptSet::new(pos, neg)
}

fn resolve_config(default: Preset, manifest: &Manifest, flags: &ParamFlags) -> Result<PipelineConfig> {
    let cli = flags.overrides()?;
    PipelineConfig::resolve(default, &[&manifest.params, &cli])
}

#[derive(Serialize)]
struct MaskReport {
    confusion: Confusion,
    /// Percentages.
    metrics: Metrics,
}

fn segment2d(manifest_path: &Path, flags: &ParamFlags, prompt_flags: &PromptFlags, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let cfg = resolve_config(Preset::Small, &manifest, flags)?;
    let [frame] = manifest.frames.as_slice() else {
        return Err(Error::Validation(format!(
            "segment2d needs exactly one frame, manifest has {}",
            manifest.frames.len()
        )));
    };
    let prompts = load_prompts(prompt_flags, Some(&manifest))?;
    let image_path = frame
        .image
        .as_ref()
        .ok_or_else(|| Error::Validation("frame has no image".into()))?;
    let image = ImageRef::probe(image_path)?;
    let vision = read_otf(&frame.vision_tokens)?.into_feature_map()?;
    let vl = read_otf(&frame.vl_tokens)?.into_feature_map()?;
    let gt = frame.gt_mask.as_ref().map(read_mask).transpose()?;

    let mut refiner = cfg
        .refiner
        .as_deref()
        .map(|cmd| SubprocessRefiner::new(cmd, out.join(".refiner")))
        .transpose()?;
    let started = Instant::now();
    let seg = segment_frame(
        &vision,
        &vl,
        &prompts,
        &image,
        &cfg,
        refiner.as_mut().map(|r| r as &mut dyn RefinerHook),
    )?;
    info!("segmented in {:.3} s", started.elapsed().as_secs_f64());
    if let Some(r) = &refiner {
        let _ = std::fs::remove_dir(r.scratch());
    }

    let report = gt
        .map(|gt| -> Result<MaskReport> {
            if (gt.height(), gt.width()) != (seg.mask.height(), seg.mask.width()) {
                return Err(Error::Validation(format!(
                    "ground truth is {}x{}, mask {}x{}",
                    gt.height(),
                    gt.width(),
                    seg.mask.height(),
                    seg.mask.width()
                )));
            }
            let c = confusion(seg.mask.data(), gt.data())?;
            Ok(MaskReport { confusion: c, metrics: metrics(&c).percent() })
        })
        .transpose()?;

    create_out(out)?;
    write_mask(out.join("mask.png"), &seg.mask)?;
    write_otf(out.join("similarity.otf"), &[cfg.d, cfg.d], seg.similarity.data())?;
    let labels: Vec<f32> = seg.prototypes.masks.labels().iter().map(|&l| l as f32).collect();
    write_otf(out.join("prototypes.otf"), &[cfg.d, cfg.d], &labels)?;
    if let Some(r) = report {
        let m = r.metrics;
        println!("IoU {:.2}  Fsc {:.2}  Pre {:.2}  Rec {:.2}", m.iou, m.fsc, m.pre, m.rec);
        write_json(&out.join("metrics.json"), &r)?;
    }
    println!("wrote {}", out.join("mask.png").display());
    Ok(())
}

fn load_frames(manifest: &Manifest) -> Result<Vec<FrameData>> {
    manifest
        .frames
        .iter()
        .map(|f| {
            Ok(FrameData {
                vision: read_otf(&f.vision_tokens)?.into_feature_map()?,
                vl: read_otf(&f.vl_tokens)?.into_feature_map()?,
                depth: f.depth.as_ref().map(|p| read_otf(p)?.into_depth_map()).transpose()?,
                intrinsics: f.intrinsics,
                pose: f.pose.clone(),
            })
        })
        .collect()
}

/// Colors from the first three principal components of the voxel features,
/// each min-max scaled to 0..=255. Grey when the grid is too small.
fn feature_colors(grid: &VoxelGrid) -> Vec<[u8; 3]> {
    let n = grid.len();
    let c = grid.channels();
    let grey = vec![[160, 160, 160]; n];
    if n < 4 || c < 3 {
        return grey;
    }
    let data: Vec<f32> = grid.cells().values().flat_map(|v| v.feature.iter().copied()).collect();
    let Ok(m) = TokenMatrix::new(n, c, data) else { return grey };
    let Ok(reduced) = pca_fit(&m, 3).and_then(|p| pca_transform(&p, &m)) else { return grey };
    let mut out = vec![[0u8; 3]; n];
    for ch in 0..3 {
        let col: Vec<f32> = reduced.iter_rows().map(|r| r[ch]).collect();
        let scaled = tokalign::alignment::minmax_normalize(&col);
        for (o, s) in out.iter_mut().zip(scaled) {
            o[ch] = (255.0 * s).round() as u8;
        }
    }
    out
}

fn centroids(grid: &VoxelGrid) -> Vec<[f32; 3]> {
    grid.cells()
        .values()
        .map(|v| [v.centroid[0] as f32, v.centroid[1] as f32, v.centroid[2] as f32])
        .collect()
}

fn reconstruct3d(manifest_path: &Path, flags: &ParamFlags, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let cfg = resolve_config(Preset::Spatial, &manifest, flags)?;
    if manifest.frames.is_empty() {
        return Err(Error::Validation("manifest lists no frames".into()));
    }
    let frames = load_frames(&manifest)?;
    let started = Instant::now();
    let rec = reconstruct(&frames, &cfg)?;
    let seconds = started.elapsed().as_secs_f64();
    for i in &rec.skipped {
        warn!("frame {i} contributed no geometry");
    }
    info!(
        "fused {} views into {} voxels from {} points in {seconds:.3} s",
        rec.views.len(),
        rec.grid.len(),
        rec.cloud.len()
    );
    create_out(out)?;
    write_grid(out.join("grid"), &rec.grid)?;
    write_ply(out.join("grid.ply"), &centroids(&rec.grid), &Coloring::Rgb(feature_colors(&rec.grid)))?;
    println!("wrote {} voxels to {}", rec.grid.len(), out.join("grid").display());
    Ok(())
}

fn query(stem: &Path, manifest: Option<&Path>, flags: &PromptFlags, tau: Option<f32>, out: &Path) -> Result<()> {
    let manifest = manifest.map(Manifest::load).transpose()?;
    let prompts = load_prompts(flags, manifest.as_ref())?;
    let tau = match tau {
        Some(t) => t,
        None => {
            let params = manifest.as_ref().map(|m| m.params.clone()).unwrap_or_default();
            PipelineConfig::resolve(Preset::Spatial, &[&params])?.tau
        }
    };
    let (grid, _) = read_grid(stem)?;
    if grid.is_empty() {
        return Err(Error::EmptyGeometry("grid has no voxels".into()));
    }
    let result = query_grid(&grid, &prompts, tau)?;
    let pts = centroids(&grid);
    let labels: Vec<u32> = result.labels.iter().map(|&l| u32::from(l)).collect();
    let mut table = Vec::with_capacity(pts.len() * 4);
    for (p, &l) in pts.iter().zip(&labels) {
        table.extend_from_slice(p);
        table.push(l as f32);
    }
    create_out(out)?;
    write_otf(out.join("similarity.otf"), &[result.len()], &result.similarity)?;
    write_otf(out.join("labels.otf"), &[result.len(), 4], &table)?;
    write_ply(out.join("query.ply"), &pts, &Coloring::Label(labels))?;
    let hits = result.labels.iter().filter(|&&l| l).count();
    println!("{hits} of {} voxels match at tau {tau}", result.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    mode: &'static str,
    confusion: Confusion,
    /// Percentages.
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    adjusted_rand_index: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds: Option<f64>,
}

fn labeled_points(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<u32>)> {
    let t = read_otf(path)?;
    if t.shape.len() != 2 || t.shape[1] != 4 {
        return Err(Error::Validation(format!(
            "{}: expected an N x 4 point table, got shape {:?}",
            path.display(),
            t.shape
        )));
    }
    let mut pts = Vec::with_capacity(t.shape[0]);
    let mut labels = Vec::with_capacity(t.shape[0]);
    for row in t.data.chunks_exact(4) {
        let l = row[3];
        if !(l >= 0.0 && l.fract() == 0.0 && l <= u32::MAX as f32) {
            return Err(Error::Validation(format!("{}: label {l} is not a non-negative integer", path.display())));
        }
        pts.push([f64::from(row[0]), f64::from(row[1]), f64::from(row[2])]);
        labels.push(l as u32);
    }
    Ok((pts, labels))
}

fn eval(mode: EvalMode, pred: &Path, gt: &Path, k: usize, seconds: Option<f64>, out: Option<&Path>) -> Result<()> {
    let report = match mode {
        EvalMode::TwoD => {
            let (p, g) = (read_mask(pred)?, read_mask(gt)?);
            if (p.height(), p.width()) != (g.height(), g.width()) {
                return Err(Error::Validation(format!(
                    "prediction is {}x{}, ground truth {}x{}",
                    p.height(),
                    p.width(),
                    g.height(),
                    g.width()
                )));
            }
            let c = confusion(p.data(), g.data())?;
            EvalReport { mode: "2d", confusion: c, metrics: metrics(&c).percent(), adjusted_rand_index: None, seconds }
        }
        EvalMode::ThreeD => {
            let (pred_pts, pred_labels) = labeled_points(pred)?;
            let (gt_pts, gt_labels) = labeled_points(gt)?;
            let projected = project_labels_knn(&gt_pts, &gt_labels, &pred_pts, k)?;
            let p: Vec<bool> = pred_labels.iter().map(|&l| l != 0).collect();
            let g: Vec<bool> = projected.iter().map(|&l| l != 0).collect();
            let c = confusion(&p, &g)?;
            let as_usize = |v: &[u32]| v.iter().map(|&l| l as usize).collect::<Vec<_>>();
            let ari = adjusted_rand_index(&as_usize(&pred_labels), &as_usize(&projected))?;
            EvalReport {
                mode: "3d",
                confusion: c,
                metrics: metrics(&c).percent(),
                adjusted_rand_index: Some(ari),
                seconds,
            }
        }
    };
    let m = report.metrics;
    println!("IoU {:.2}  Fsc {:.2}  Pre {:.2}  Rec {:.2}", m.iou, m.fsc, m.pre, m.rec);
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}
