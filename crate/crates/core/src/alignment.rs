//! Language grounding of visual prototypes: masked average pooling of
//! vision-language tokens and prompt similarity maps.

use crate::clustering::MaskSet;
use crate::error::{Error, Result};
use crate::tensor::{dot, ensure_finite, normalize_in_place, norm, TokenGrid, ZERO_NORM};

/// Per-view `d x d x C_vl` features after pooling over prototype masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledGrid {
    d: usize,
    channels: usize,
    view_index: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl PooledGrid {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn view_index(&self) -> usize {
        self.view_index
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn cell(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Reinterpret as a token grid, e.g. to pool it again.
    pub fn to_token_grid(&self) -> TokenGrid {
        TokenGrid::new(self.d, self.channels, self.data.clone()).expect("shape is consistent")
    }

    /// Multiply every value by `factor`; clears the normalized flag.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            normalized: false,
            ..self.clone()
        }
    }
}

/// A unit-norm text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    prompt: String,
    vector: Vec<f32>,
}

impl TextEmbedding {
    /// Wraps `vector`, normalizing it to unit length.
    pub fn new(prompt: impl Into<String>, mut vector: Vec<f32>) -> Result<Self> {
        let prompt = prompt.into();
        ensure_finite(&vector)?;
        if norm(&vector) < ZERO_NORM {
            return Err(Error::validation(format!(
                "embedding for prompt `{prompt}` is a zero vector"
            )));
        }
        normalize_in_place(&mut vector);
        Ok(Self { prompt, vector })
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    positives: Vec<TextEmbedding>,
    negatives: Vec<TextEmbedding>,
}

impl PromptSet {
    pub fn new(positives: Vec<TextEmbedding>, negatives: Vec<TextEmbedding>) -> Result<Self> {
        let first = positives
            .first()
            .ok_or_else(|| Error::validation("at least one positive prompt is required"))?;
        let dim = first.dim();
        if let Some(bad) = positives.iter().chain(&negatives).find(|t| t.dim() != dim) {
            return Err(Error::validation(format!(
                "prompt `{}` has dimension {}, expected {dim}",
                bad.prompt(),
                bad.dim()
            )));
        }
        Ok(Self {
            positives,
            negatives,
        })
    }

    pub fn positives(&self) -> &[TextEmbedding] {
        &self.positives
    }

    pub fn negatives(&self) -> &[TextEmbedding] {
        &self.negatives
    }

    pub fn dim(&self) -> usize {
        self.positives[0].dim()
    }

    /// Sum of positive minus sum of negative similarities for one feature.
    pub fn combined_score(&self, feature: &[f32]) -> f64 {
        let pos: f64 = self.positives.iter().map(|t| dot(feature, t.vector())).sum();
        let neg: f64 = self.negatives.iter().map(|t| dot(feature, t.vector())).sum();
        pos - neg
    }
}

/// A `d x d` similarity map, optionally rescaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    d: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl SimilarityMap {
    pub fn new(d: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if data.len() != d * d {
            return Err(Error::validation(format!(
                "similarity map {d}x{d} needs {} values, got {}",
                d * d,
                data.len()
            )));
        }
        ensure_finite(&data)?;
        if normalized && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("normalized similarity outside [0, 1]"));
        }
        Ok(Self {
            d,
            data,
            normalized,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Replace every cell of `view` with the mean of the vision-language tokens
/// sharing its prototype mask in that view.
pub fn masked_average_pool(vl_tokens: &TokenGrid, masks: &MaskSet, view: usize) -> Result<PooledGrid> {
    let d = vl_tokens.d();
    if masks.d() != d {
        return Err(Error::validation(format!(
            "token grid d = {d} but masks are {}x{}",
            masks.d(),
            masks.d()
        )));
    }
    if view >= masks.n_views() {
        return Err(Error::validation(format!(
            "view {view} outside the {} masked views",
            masks.n_views()
        )));
    }
    let c = vl_tokens.channels();
    let labels = masks.view_labels(view);
    let mut sums = vec![0.0f64; masks.k() * c];
    let mut counts = vec![0usize; masks.k()];
    for (cell, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &x) in sums[l * c..(l + 1) * c].iter_mut().zip(vl_tokens.cell(cell)) {
            *s += f64::from(x);
        }
    }
    let means: Vec<f32> = sums
        .chunks_exact(c.max(1))
        .zip(&counts)
        .flat_map(|(s, &n)| s.iter().map(move |v| if n > 0 { (v / n as f64) as f32 } else { 0.0 }))
        .collect();
    let mut data = Vec::with_capacity(d * d * c);
    for &l in labels {
        data.extend_from_slice(&means[l * c..(l + 1) * c]);
    }
    Ok(PooledGrid {
        d,
        channels: c,
        view_index: view,
        data,
        normalized: false,
    })
}

/// Unit-normalize every pooled cell; zero cells pass through.
pub fn normalize_pooled(pooled: &PooledGrid) -> PooledGrid {
    let mut out = pooled.clone();
    for cell in out.data.chunks_exact_mut(out.channels.max(1)) {
        normalize_in_place(cell);
    }
    out.normalized = true;
    out
}

fn require_normalized(pooled: &PooledGrid, dim: usize) -> Result<()> {
    if !pooled.normalized {
        return Err(Error::validation("pooled grid must be normalized before scoring"));
    }
    if pooled.channels != dim {
        return Err(Error::validation(format!(
            "pooled features have {} channels, text embeddings {dim}",
            pooled.channels
        )));
    }
    Ok(())
}

/// Cosine similarity of every pooled cell with one prompt.
pub fn similarity_map(pooled: &PooledGrid, text: &TextEmbedding) -> Result<SimilarityMap> {
    require_normalized(pooled, text.dim())?;
    let data = (0..pooled.d * pooled.d)
        .map(|i| dot(pooled.cell(i), text.vector()) as f32)
        .collect();
    Ok(SimilarityMap {
        d: pooled.d,
        data,
        normalized: false,
    })
}

/// Positive-prompt similarities minus negative-prompt similarities, per cell.
pub fn combined_similarity(pooled: &PooledGrid, prompts: &PromptSet) -> Result<SimilarityMap> {
    require_normalized(pooled, prompts.dim())?;
    let data = (0..pooled.d * pooled.d)
        .map(|i| prompts.combined_score(pooled.cell(i)) as f32)
        .collect();
    Ok(SimilarityMap {
        d: pooled.d,
        data,
        normalized: false,
    })
}

/// Min-max rescale to `[0, 1]`. A constant input maps to 0.5 everywhere.
pub fn minmax_normalize(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || hi <= lo {
        return vec![0.5; values.len()];
    }
    let range = f64::from(hi) - f64::from(lo);
    values
        .iter()
        .map(|&v| ((f64::from(v) - f64::from(lo)) / range) as f32)
        .collect()
}

pub fn normalize_similarity(s: &SimilarityMap) -> SimilarityMap {
    SimilarityMap {
        d: s.d,
        data: minmax_normalize(&s.data),
        normalized: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::MaskSet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(d: usize, c: usize, data: Vec<f32>) -> TokenGrid {
        TokenGrid::new(d, c, data).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize_in_place(&mut v);
        v
    }

    fn pooled_from(d: usize, c: usize, data: Vec<f32>) -> PooledGrid {
        normalize_pooled(&PooledGrid {
            d,
            channels: c,
            view_index: 0,
            data,
            normalized: false,
        })
    }

    #[test]
    fn two_cell_mask_mean() {
        let g = grid(1, 2, vec![1.0, 0.0]);
        let masks = MaskSet::from_labels(1, 1, 1, vec![0]).unwrap();
        assert_eq!(masked_average_pool(&g, &masks, 0).unwrap().data(), &[1.0, 0.0]);

        let g = grid(2, 2, vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0, 7.0, 7.0]);
        let masks = MaskSet::from_labels(3, 1, 2, vec![0, 0, 1, 2]).unwrap();
        let p = masked_average_pool(&g, &masks, 0).unwrap();
        assert_eq!(p.cell(0), &[0.5, 0.5]);
        assert_eq!(p.cell(1), &[0.5, 0.5]);
        // single-cell masks are unchanged
        assert_eq!(p.cell(2), &[5.0, 5.0]);
        assert_eq!(p.cell(3), &[7.0, 7.0]);
    }

    #[test]
    fn pooling_is_per_view() {
        let g = grid(1, 1, vec![4.0]);
        let masks = MaskSet::from_labels(1, 2, 1, vec![0, 0]).unwrap();
        assert_eq!(masked_average_pool(&g, &masks, 1).unwrap().data(), &[4.0]);
        assert!(masked_average_pool(&g, &masks, 2).is_err());
    }

    #[test]
    fn pooling_dimension_mismatch() {
        let g = grid(2, 1, vec![0.0; 4]);
        let masks = MaskSet::from_labels(1, 1, 3, vec![0; 9]).unwrap();
        assert!(masked_average_pool(&g, &masks, 0).is_err());
    }

    #[test]
    fn normalize_pooled_cases() {
        let p = pooled_from(1, 2, vec![3.0, 4.0]);
        assert_eq!(p.data(), &[0.6, 0.8]);
        let again = normalize_pooled(&p);
        for (a, b) in p.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let z = pooled_from(1, 2, vec![0.0, 0.0]);
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn similarity_identical_and_orthogonal() {
        let p = pooled_from(1, 2, vec![1.0, 0.0]);
        let same = TextEmbedding::new("a", vec![1.0, 0.0]).unwrap();
        let orth = TextEmbedding::new("b", vec![0.0, 1.0]).unwrap();
        assert_eq!(similarity_map(&p, &same).unwrap().data(), &[1.0]);
        assert_eq!(similarity_map(&p, &orth).unwrap().data(), &[0.0]);
        let prompts = PromptSet::new(vec![same], vec![orth]).unwrap();
        assert_eq!(combined_similarity(&p, &prompts).unwrap().data(), &[1.0]);
    }

    #[test]
    fn similarity_requires_normalized_input() {
        let raw = PooledGrid {
            d: 1,
            channels: 2,
            view_index: 0,
            data: vec![2.0, 0.0],
            normalized: false,
        };
        let t = TextEmbedding::new("a", vec![1.0, 0.0]).unwrap();
        assert!(similarity_map(&raw, &t).is_err());
        let t3 = TextEmbedding::new("c", vec![1.0, 0.0, 0.0]).unwrap();
        assert!(similarity_map(&normalize_pooled(&raw), &t3).is_err());
    }

    #[test]
    fn similarity_matches_cosine_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f32> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = pooled_from(2, 8, data.clone());
        let t = TextEmbedding::new("t", unit(&mut rng, 8)).unwrap();
        let s = similarity_map(&p, &t).unwrap();
        for cell in 0..4 {
            let a = &data[cell * 8..(cell + 1) * 8];
            let num: f64 = a.iter().zip(t.vector()).map(|(x, y)| *x as f64 * *y as f64).sum();
            let cos = num / (norm(a) * norm(t.vector()));
            assert!((s.data()[cell] as f64 - cos).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_negatives_sum_positive_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = pooled_from(3, 5, (0..45).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let pos: Vec<_> = (0..3)
            .map(|i| TextEmbedding::new(format!("p{i}"), unit(&mut rng, 5)).unwrap())
            .collect();
        let combined = combined_similarity(&p, &PromptSet::new(pos.clone(), vec![]).unwrap()).unwrap();
        for cell in 0..9 {
            let sum: f32 = pos
                .iter()
                .map(|t| similarity_map(&p, t).unwrap().data()[cell])
                .sum();
            assert!((combined.data()[cell] - sum).abs() < 1e-6);
        }
    }

    #[test]
    fn prompt_set_validation() {
        assert!(PromptSet::new(vec![], vec![]).is_err());
        let a = TextEmbedding::new("a", vec![1.0, 0.0]).unwrap();
        let b = TextEmbedding::new("b", vec![1.0, 0.0, 0.0]).unwrap();
        assert!(PromptSet::new(vec![a], vec![b]).is_err());
        assert!(TextEmbedding::new("z", vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn normalize_similarity_cases() {
        let s = SimilarityMap::new(1, vec![0.25], false).unwrap();
        assert_eq!(normalize_similarity(&s).data(), &[0.5]);
        assert_eq!(minmax_normalize(&[-1.0, 0.0, 1.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[3.0, 3.0]), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn normalized_map_spans_unit_interval(v in proptest::collection::vec(-10.0f32..10.0, 4)) {
            prop_assume!(v.iter().any(|x| *x != v[0]));
            let s = normalize_similarity(&SimilarityMap::new(2, v, false).unwrap());
            let lo = s.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = s.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(lo, 0.0);
            prop_assert_eq!(hi, 1.0);
        }

        #[test]
        fn pooling_is_idempotent(seed in 0u64..300, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(4, 3, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let labels = (0..16).map(|_| rng.gen_range(0..k)).collect();
            let masks = MaskSet::from_labels(k, 1, 4, labels).unwrap();
            let once = masked_average_pool(&g, &masks, 0).unwrap();
            let twice = masked_average_pool(&once.to_token_grid(), &masks, 0).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn duplicate_positive_doubles_contribution(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = pooled_from(2, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let t = TextEmbedding::new("t", unit(&mut rng, 4)).unwrap();
            let single = combined_similarity(&p, &PromptSet::new(vec![t.clone()], vec![]).unwrap()).unwrap();
            let double = combined_similarity(&p, &PromptSet::new(vec![t.clone(), t], vec![]).unwrap()).unwrap();
            for (a, b) in single.data().iter().zip(double.data()) {
                prop_assert_eq!(2.0 * a, *b);
            }
        }

        #[test]
        fn scaling_before_normalization_is_invisible(seed in 0u64..300, scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = PooledGrid {
                d: 3, channels: 4, view_index: 0,
                data: (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                normalized: false,
            };
            let prompts = PromptSet::new(
                vec![TextEmbedding::new("p", unit(&mut rng, 4)).unwrap()],
                vec![TextEmbedding::new("n", unit(&mut rng, 4)).unwrap()],
            ).unwrap();
            let a = normalize_similarity(&combined_similarity(&normalize_pooled(&raw), &prompts).unwrap());
            let b = normalize_similarity(&combined_similarity(&normalize_pooled(&raw.scaled(scale)), &prompts).unwrap());
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn unit_inputs_give_bounded_similarity(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = pooled_from(2, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let t = TextEmbedding::new("t", unit(&mut rng, 6)).unwrap();
            for &v in similarity_map(&p, &t).unwrap().data() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
