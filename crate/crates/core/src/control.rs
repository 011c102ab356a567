//! Concept-masked control of the image condition.
//!
//! A textual concept mask is read off the concept-specific block: the
//! latent→concept-token attention, averaged over heads and concept tokens and
//! normalized (by its max for Direct Adding, by its mean for fused attention).
//! The mask then re-weights how much each latent position receives from the
//! image condition:
//!
//! * Direct Adding: the image-branch output at each position is multiplied by
//!   the mask value there.
//! * Fused attention: the latent→image bias row `i` becomes `log(λ·mask_i)`,
//!   and text tokens outside the concept span are suppressed from attending to
//!   the image tokens through `M′`.
//!
//! Injection is withheld for the first `⌈warmup_ratio · T⌉` steps.

use serde::{Deserialize, Serialize};

use crate::attention::{
    masked_direct_adding, mm_attention, AttentionBlockWeights, AttentionOutput, BiasMatrix,
    ConceptSpan, FusedLayout,
};
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{floored_ln, mean_over, Axis, Matrix};

/// Which adapter family the control is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    /// Decoupled cross-attention with Direct Adding.
    Direct,
    /// Fused multi-modal attention with additive bias.
    Mm,
}

impl AdapterMode {
    pub fn normalization(self) -> MaskNormalization {
        match self {
            AdapterMode::Direct => MaskNormalization::MaxNormalized,
            AdapterMode::Mm => MaskNormalization::MeanNormalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNormalization {
    MaxNormalized,
    MeanNormalized,
}

/// Reduced, normalized latent→concept attention over the spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    values: Matrix,
    mode: MaskNormalization,
    source_block: usize,
    source_timestep: usize,
}

impl ConceptMask {
    /// Normalizes a strictly positive raw map.
    fn normalized(raw: Matrix, mode: MaskNormalization) -> Result<Self> {
        if raw.cols() == 0 {
            return invalid("concept mask over zero positions");
        }
        if raw.data().iter().any(|&v| v.is_nan() || v <= 0.0 || v.is_infinite()) {
            return invalid("concept attention must be strictly positive and finite");
        }
        let denom = match mode {
            MaskNormalization::MaxNormalized => raw.data().iter().copied().fold(f64::MIN, f64::max),
            MaskNormalization::MeanNormalized => {
                raw.data().iter().sum::<f64>() / raw.cols() as f64
            }
        };
        Ok(Self {
            values: raw.map(|v| v / denom),
            mode,
            source_block: 0,
            source_timestep: 0,
        })
    }

    /// All-ones mask; satisfies both normalizations.
    pub fn neutral(len: usize, mode: MaskNormalization) -> Self {
        Self {
            values: Matrix::filled(1, len, 1.0),
            mode,
            source_block: 0,
            source_timestep: 0,
        }
    }

    /// Builds a mask from explicit values, checking the normalization invariant.
    pub fn from_values(values: Vec<f64>, mode: MaskNormalization) -> Result<Self> {
        let m = Matrix::row_vector(values);
        if m.cols() == 0 || m.data().iter().any(|&v| v.is_nan() || v <= 0.0) {
            return invalid("mask values must be strictly positive");
        }
        let stat = match mode {
            MaskNormalization::MaxNormalized => m.data().iter().copied().fold(f64::MIN, f64::max),
            MaskNormalization::MeanNormalized => m.data().iter().sum::<f64>() / m.cols() as f64,
        };
        if (stat - 1.0).abs() > 1e-12 {
            return invalid(format!("mask is not {mode:?}: statistic {stat}"));
        }
        Ok(Self {
            values: m,
            mode,
            source_block: 0,
            source_timestep: 0,
        })
    }

    pub fn with_source(mut self, block: usize, timestep: usize) -> Self {
        self.source_block = block;
        self.source_timestep = timestep;
        self
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    pub fn mode(&self) -> MaskNormalization {
        self.mode
    }

    pub fn source_block(&self) -> usize {
        self.source_block
    }

    pub fn source_timestep(&self) -> usize {
        self.source_timestep
    }
}

/// Head- and concept-token-averaged attention, `1 x positions`.
pub(crate) fn concept_attention(map: &[Matrix], span: ConceptSpan) -> Result<Matrix> {
    let first = map
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty head stack".into()))?;
    span.check_within(first.cols())?;
    let sliced = map
        .iter()
        .map(|m| m.slice_cols(span.range()))
        .collect::<Result<Vec<_>>>()?;
    mean_over(&sliced, &[Axis::Head, Axis::Col])
}

/// Mask from a cross-attention text map (`positions x M` per head), max-normalized.
pub fn extract_mask_direct(map: &[Matrix], span: ConceptSpan) -> Result<ConceptMask> {
    ConceptMask::normalized(concept_attention(map, span)?, MaskNormalization::MaxNormalized)
}

/// Mask from a full fused map (`(M+2N)²` per head), mean-normalized.
pub fn extract_mask_mm(
    fused_map: &[Matrix],
    text_len: usize,
    latent_len: usize,
    span: ConceptSpan,
) -> Result<ConceptMask> {
    let layout = FusedLayout::new(text_len, latent_len);
    if fused_map
        .iter()
        .any(|m| m.shape() != (layout.total(), layout.total()))
    {
        return shape_err(format!(
            "fused map must be {0}x{0} per head",
            layout.total()
        ));
    }
    span.check_within(text_len)?;
    let latent_rows = fused_map
        .iter()
        .map(|m| m.slice_rows(layout.latent()))
        .collect::<Result<Vec<_>>>()?;
    extract_mask_mm_latent_rows(&latent_rows, span)
}

/// As [`extract_mask_mm`] for maps that already hold only the latent rows.
pub(crate) fn extract_mask_mm_latent_rows(
    latent_rows: &[Matrix],
    span: ConceptSpan,
) -> Result<ConceptMask> {
    ConceptMask::normalized(
        concept_attention(latent_rows, span)?,
        MaskNormalization::MeanNormalized,
    )
}

/// `Attn(x, c_text) + λ · mask ⊙ Attn(x, c_image)`, mask broadcast over channels.
pub fn conceptrol_direct_adding(
    x: &Matrix,
    c_text: &Matrix,
    c_image: &Matrix,
    w: &AttentionBlockWeights,
    lambda: f64,
    mask: &ConceptMask,
) -> Result<AttentionOutput> {
    if mask.mode != MaskNormalization::MaxNormalized {
        return invalid("Direct Adding needs a max-normalized concept mask");
    }
    if mask.len() != x.rows() {
        return shape_err(format!(
            "mask has {} positions, latent has {}",
            mask.len(),
            x.rows()
        ));
    }
    masked_direct_adding(x, c_text, c_image, w, lambda, Some(mask.values()))
}

/// `M′(λ)`: `log λ` on concept-token rows, `log ε` elsewhere, `M x N`.
pub fn build_mprime(
    lambda: f64,
    suppression_epsilon: f64,
    span: ConceptSpan,
    text_len: usize,
    latent_len: usize,
) -> Result<Matrix> {
    if !(suppression_epsilon > 0.0 && suppression_epsilon < 1.0) {
        return invalid(format!(
            "suppression_epsilon must lie in (0, 1), got {suppression_epsilon}"
        ));
    }
    span.check_within(text_len)?;
    let in_span = floored_ln(lambda);
    let out_span = floored_ln(suppression_epsilon);
    Ok(Matrix::from_fn(text_len, latent_len, |i, _| {
        if span.contains(i) {
            in_span
        } else {
            out_span
        }
    }))
}

/// `B_concept(λ)`: text→image `M′`, latent→image `log(λ·mask_i)` constant along
/// each row, image→latent `log λ`, zeros elsewhere.
pub fn build_bias_conceptrol(
    lambda: f64,
    mask: &ConceptMask,
    mprime: &Matrix,
    text_len: usize,
    latent_len: usize,
) -> Result<BiasMatrix> {
    if mask.mode != MaskNormalization::MeanNormalized {
        return invalid("fused attention needs a mean-normalized concept mask");
    }
    if mask.len() != latent_len {
        return shape_err(format!(
            "mask has {} positions, expected {latent_len}",
            mask.len()
        ));
    }
    assemble_masked_bias(lambda, mask.values(), Some(mprime), text_len, latent_len)
}

/// Bias with latent→image rows weighted by arbitrary non-negative `weights`.
/// Without `text_to_image` that block stays zero, as in the vanilla bias.
pub(crate) fn assemble_masked_bias(
    lambda: f64,
    weights: &[f64],
    text_to_image: Option<&Matrix>,
    text_len: usize,
    latent_len: usize,
) -> Result<BiasMatrix> {
    let layout = FusedLayout::new(text_len, latent_len);
    if weights.len() != latent_len {
        return shape_err(format!(
            "{} mask weights for {latent_len} latent tokens",
            weights.len()
        ));
    }
    let mut bias = BiasMatrix::zeros(layout);
    if let Some(mprime) = text_to_image {
        if mprime.shape() != (text_len, latent_len) {
            return shape_err(format!(
                "M′ is {:?}, expected {text_len}x{latent_len}",
                mprime.shape()
            ));
        }
        let image = layout.image();
        for i in layout.text() {
            for (j, col) in image.clone().enumerate() {
                bias.set(i, col, mprime.get(i, j));
            }
        }
    }
    for (r, row) in layout.latent().enumerate() {
        let v = floored_ln(lambda * weights[r]);
        bias.fill_block(row..row + 1, layout.image(), v);
    }
    bias.fill_block(layout.image(), layout.latent(), floored_ln(lambda));
    Ok(bias)
}

/// Fused attention under `B_concept(λ)`.
#[allow(clippy::too_many_arguments)]
pub fn conceptrol_mm_attention(
    x: &Matrix,
    c_text: &Matrix,
    c_image: &Matrix,
    span: ConceptSpan,
    w: &AttentionBlockWeights,
    cfg: &ConceptrolConfig,
    mask: &ConceptMask,
) -> Result<AttentionOutput> {
    let bias = conceptrol_bias(cfg, span, mask, c_text.rows(), x.rows())?;
    mm_attention(x, c_text, c_image, w, &bias)
}

pub(crate) fn conceptrol_bias(
    cfg: &ConceptrolConfig,
    span: ConceptSpan,
    mask: &ConceptMask,
    text_len: usize,
    latent_len: usize,
) -> Result<BiasMatrix> {
    let mprime = build_mprime(cfg.lambda, cfg.suppression_epsilon, span, text_len, latent_len)?;
    build_bias_conceptrol(cfg.lambda, mask, &mprime, text_len, latent_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptrolConfig {
    pub lambda: f64,
    pub warmup_ratio: f64,
    pub suppression_epsilon: f64,
    pub concept_block: usize,
    pub mode: AdapterMode,
}

impl ConceptrolConfig {
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_SUPPRESSION_EPSILON: f64 = 1e-6;

    /// Defaults per adapter family: warmup 0.2 for Direct Adding, none for fused.
    pub fn for_mode(mode: AdapterMode, concept_block: usize) -> Self {
        let warmup_ratio = match mode {
            AdapterMode::Direct => 0.2,
            AdapterMode::Mm => 0.0,
        };
        Self {
            lambda: Self::DEFAULT_LAMBDA,
            warmup_ratio,
            suppression_epsilon: Self::DEFAULT_SUPPRESSION_EPSILON,
            concept_block,
            mode,
        }
    }

    /// Returns the offending key on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(("lambda", format!("must be a finite value >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err((
                "warmup_ratio",
                format!("must lie in [0, 1], got {}", self.warmup_ratio),
            ));
        }
        if !(self.suppression_epsilon > 0.0 && self.suppression_epsilon < 1.0) {
            return Err((
                "suppression_epsilon",
                format!("must lie in (0, 1), got {}", self.suppression_epsilon),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Inject,
    TextOnly,
}

/// Number of leading steps during which injection is withheld.
pub fn warmup_steps(warmup_ratio: f64, total_steps: usize) -> usize {
    // the small offset absorbs representation error, e.g. 0.2 · 50
    let raw = (warmup_ratio * total_steps as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(total_steps)
}

/// `step_index` is 1-based in denoising order.
pub fn warmup_gate(step_index: usize, total_steps: usize, cfg: &ConceptrolConfig) -> Gate {
    if step_index <= warmup_steps(cfg.warmup_ratio, total_steps) {
        Gate::TextOnly
    } else {
        Gate::Inject
    }
}

/// Masks carried across blocks and timesteps within one generation run.
#[derive(Debug, Clone)]
pub struct MaskCache {
    pub latest: Option<ConceptMask>,
    pub previous_timestep: Option<ConceptMask>,
    neutral: ConceptMask,
}

impl MaskCache {
    pub fn new(latent_len: usize, mode: MaskNormalization) -> Self {
        Self {
            latest: None,
            previous_timestep: None,
            neutral: ConceptMask::neutral(latent_len, mode),
        }
    }

    /// Rolls the cache over to a new timestep.
    pub fn begin_timestep(&mut self) {
        if let Some(m) = self.latest.take() {
            self.previous_timestep = Some(m);
        }
    }

    pub fn record(&mut self, mask: ConceptMask) {
        self.latest = Some(mask);
    }

    pub fn neutral(&self) -> &ConceptMask {
        &self.neutral
    }
}

/// Blocks ahead of the concept block reuse the previous timestep's mask
/// (neutral before any exists); the rest use the current one.
pub fn mask_for_block(block: usize, concept_block: usize, cache: &MaskCache) -> &ConceptMask {
    let chosen = if block < concept_block {
        cache.previous_timestep.as_ref()
    } else {
        cache.latest.as_ref().or(cache.previous_timestep.as_ref())
    };
    chosen.unwrap_or(&cache.neutral)
}
