//! End-to-end drivers: single-image segmentation and multi-view voxel map
//! reconstruction. Errors are tagged with the stage that raised them.

use log::warn;
use rayon::prelude::*;

use crate::alignment::{
    combined_similarity, masked_average_pool, normalize_pooled, normalize_similarity, PooledGrid,
    PromptSet, SimilarityMap,
};
use crate::clustering::{assignments_to_masks, kmeans_fit, ClusterModel, MaskSet};
use crate::config::PipelineConfig;
use crate::error::{Error, Result, StageExt};
use crate::fusion::{build_spatial_features, project_pooled_to_points, voxel_downsample, SemanticCloud, VoxelGrid};
use crate::geometry::{backproject, median_depth_grid, CameraFrame, DepthMap, GlobalPoints, Intrinsics, PatchPointMap, Pose};
use crate::reduction::{pca_fit, pca_transform, PcaModel};
use crate::refinement::{refine, BinaryMask, ImageRef, RefinerHook};
use crate::tensor::{resize_bilinear, resize_nearest, FeatureMap, TokenGrid, TokenMatrix};

/// Vision tokens on the shared grid, unit-normalized per cell.
pub fn shared_vision_grid(vision: &FeatureMap, d: usize) -> Result<TokenGrid> {
    Ok(resize_bilinear(vision, d)?.normalized())
}

/// Clusters over the reduced vision tokens and the masks they induce.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub pca: PcaModel,
    pub clusters: ClusterModel,
    pub masks: MaskSet,
}

/// Reduce and cluster the stacked vision grids of all views.
pub fn visual_prototypes(grids: &[TokenGrid], cfg: &PipelineConfig) -> Result<Prototypes> {
    let matrix = TokenMatrix::stack(grids).stage("resize")?;
    let (pca, clusters) = reduce_and_cluster(&matrix, cfg)?;
    let masks = assignments_to_masks(&clusters, grids.len(), cfg.d).stage("cluster")?;
    Ok(Prototypes { pca, clusters, masks })
}

fn reduce_and_cluster(matrix: &TokenMatrix, cfg: &PipelineConfig) -> Result<(PcaModel, ClusterModel)> {
    let pca = pca_fit(matrix, cfg.c_r).stage("reduce")?;
    let reduced = pca_transform(&pca, matrix).stage("reduce")?;
    let clusters = kmeans_fit(&reduced, &cfg.kmeans()).stage("cluster")?;
    Ok((pca, clusters))
}

/// Prototypes from vision features concatenated with world coordinates.
/// Cells without geometry form one extra mask, index `k`, in every view.
pub fn spatial_prototypes(
    grids: &[TokenGrid],
    points: &GlobalPoints,
    maps: &[PatchPointMap],
    cfg: &PipelineConfig,
) -> Result<Prototypes> {
    let spatial = build_spatial_features(grids, points, maps).stage("spatial")?;
    let (pca, clusters) = reduce_and_cluster(spatial.matrix(), cfg)?;
    let cells = cfg.d * cfg.d;
    let mut labels = vec![cfg.k; grids.len() * cells];
    for (&(view, cell), &a) in spatial.origins().iter().zip(clusters.assignments()) {
        labels[view * cells + cell] = a;
    }
    let masks = MaskSet::from_labels(cfg.k + 1, grids.len(), cfg.d, labels).stage("cluster")?;
    Ok(Prototypes { pca, clusters, masks })
}

/// Pool a view's vision-language tokens over the prototype masks and
/// normalize each cell.
pub fn pooled_view(vl: &FeatureMap, masks: &MaskSet, view: usize, d: usize) -> Result<PooledGrid> {
    let grid = resize_nearest(vl, d).stage("resize")?;
    let pooled = masked_average_pool(&grid, masks, view).stage("pool")?;
    Ok(normalize_pooled(&pooled))
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub prototypes: Prototypes,
    pub pooled: PooledGrid,
    /// Min-max normalized combined similarity on the `d x d` grid.
    pub similarity: SimilarityMap,
    pub mask: BinaryMask,
}

/// Segment one image: prototypes from `vision`, grounded through `vl`,
/// scored against `prompts` and resolved to an image-resolution mask.
pub fn segment_frame(
    vision: &FeatureMap,
    vl: &FeatureMap,
    prompts: &PromptSet,
    image: &ImageRef,
    cfg: &PipelineConfig,
    hook: Option<&mut dyn RefinerHook>,
) -> Result<Segmentation> {
    cfg.validate()?;
    let grid = shared_vision_grid(vision, cfg.d).stage("resize")?;
    let prototypes = visual_prototypes(std::slice::from_ref(&grid), cfg)?;
    let pooled = pooled_view(vl, &prototypes.masks, 0, cfg.d)?;
    let raw = combined_similarity(&pooled, prompts).stage("similarity")?;
    let similarity = normalize_similarity(&raw);
    let mask = refine(image, &similarity, hook, cfg.tau).stage("refine")?;
    Ok(Segmentation {
        prototypes,
        pooled,
        similarity,
        mask,
    })
}

/// One view of a multi-view scene.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub vision: FeatureMap,
    pub vl: FeatureMap,
    pub depth: Option<DepthMap>,
    pub intrinsics: Option<Intrinsics>,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub grid: VoxelGrid,
    pub cloud: SemanticCloud,
    pub prototypes: Prototypes,
    /// Input frame index of each fused view.
    pub views: Vec<usize>,
    pub skipped: Vec<usize>,
}

struct ViewGeometry {
    frame: usize,
    vision: TokenGrid,
    local: Vec<nalgebra::Point3<f64>>,
    map: PatchPointMap,
}

fn view_geometry(index: usize, f: &FrameData, cfg: &PipelineConfig) -> Result<Option<ViewGeometry>> {
    let Some(depth) = &f.depth else {
        warn!("frame {index}: no depth, skipped");
        return Ok(None);
    };
    let k = f
        .intrinsics
        .ok_or_else(|| Error::validation(format!("frame {index} has depth but no intrinsics")))
        .stage("depth")?;
    let frame = CameraFrame::new(depth.clone(), k, f.pose.clone(), (cfg.depth_min, cfg.depth_max)).stage("depth")?;
    let grid = median_depth_grid(&frame, cfg.d).stage("depth")?;
    let (local, map) = match backproject(&grid, &k) {
        Ok(r) => r,
        Err(Error::EmptyGeometry(_)) => {
            warn!("frame {index}: no valid depth, skipped");
            return Ok(None);
        }
        Err(e) => return Err(e).stage("backproject"),
    };
    let vision = shared_vision_grid(&f.vision, cfg.d).stage("resize")?;
    Ok(Some(ViewGeometry {
        frame: index,
        vision,
        local,
        map,
    }))
}

/// Fuse posed RGB-D views into a voxel map of language-grounded features.
/// Frames without usable depth are skipped.
pub fn reconstruct(frames: &[FrameData], cfg: &PipelineConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let views: Vec<ViewGeometry> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| view_geometry(i, f, cfg))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if views.is_empty() {
        return Err(Error::EmptyGeometry("no frame has usable depth".into())).stage("backproject");
    }
    let used: Vec<usize> = views.iter().map(|v| v.frame).collect();
    let skipped = (0..frames.len()).filter(|i| !used.contains(i)).collect();

    let mut global = GlobalPoints::default();
    let mut maps = Vec::with_capacity(views.len());
    let mut grids = Vec::with_capacity(views.len());
    for (view, g) in views.into_iter().enumerate() {
        let pose = &frames[g.frame].pose;
        maps.push(global.push_view(view, &g.local, g.map, pose));
        grids.push(g.vision);
    }

    let prototypes = if cfg.spatial {
        spatial_prototypes(&grids, &global, &maps, cfg)?
    } else {
        visual_prototypes(&grids, cfg)?
    };
    let pooled: Vec<PooledGrid> = used
        .par_iter()
        .enumerate()
        .map(|(view, &i)| pooled_view(&frames[i].vl, &prototypes.masks, view, cfg.d))
        .collect::<Result<_>>()?;
    let cloud = project_pooled_to_points(&pooled, &global, &maps).stage("project")?;
    let grid = voxel_downsample(&cloud, cfg.voxel).stage("voxelize")?;
    Ok(Reconstruction {
        grid,
        cloud,
        prototypes,
        views: used,
        skipped,
    })
}
