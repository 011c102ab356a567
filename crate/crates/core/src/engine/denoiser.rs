//! Planted-concept toy denoiser.
//!
//! Every block reads the same query source: fixed per-position features plus
//! a small multiple of the current latent. Block outputs are summed into the
//! clean-latent prediction `f(cond)`, from which the noise estimate is
//! derived, so a run converges to whatever the attention stack paints.
//!
//! Channel layout of latents and condition tokens:
//!
//! | channels | meaning                                         |
//! |----------|-------------------------------------------------|
//! | 0..3     | RGB appearance                                  |
//! | 3        | concept presence (segmentation channel)         |
//! | 4..C     | context features                                |
//!
//! The planted block's heads project channel 3 of the query source and of the
//! tokens onto one shared direction, so a latent inside the planted region
//! scores exactly `margin` higher against every concept token than a latent
//! outside it. Its value projections pass each head's channel slice through
//! unchanged.

use serde::{Deserialize, Serialize};

use crate::attention::{
    build_bias_vanilla, cross_attention, direct_adding, masked_direct_adding,
    mm_attention_latent_rows, AttentionBlockWeights, AttentionOutput, BiasMatrix, ConceptSpan,
    ConditionSet, FusedLayout, HeadProjection,
};
use crate::control::{
    assemble_masked_bias, conceptrol_bias, conceptrol_direct_adding, extract_mask_direct,
    extract_mask_mm_latent_rows, mask_for_block, warmup_gate, AdapterMode, ConceptMask,
    ConceptrolConfig, Gate, MaskCache,
};
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{mean_over, Axis, Matrix, Prng};

use super::NoiseSchedule;

pub const RGB_CHANNELS: std::ops::Range<usize> = 0..3;
pub const CONCEPT_CHANNEL: usize = 3;
pub const FIRST_CONTEXT_CHANNEL: usize = 4;

/// Axis-aligned rectangle of latent cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    /// Row-major membership over an `h x w` grid.
    pub fn indicator(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| self.contains(i / w, i % w)).collect()
    }
}

/// Sizes and construction constants of a toy instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub text_tokens: usize,
    /// Image-condition tokens for Direct Adding; fused mode always uses `H·W`.
    pub image_tokens: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub planted_block: usize,
    pub margin: f64,
    pub region: Region,
    pub concept_span: ConceptSpan,
    /// Weight of the current latent in the query source of unplanted blocks.
    pub latent_mix: f64,
    /// Scale of the random value projections in unplanted blocks.
    pub background_value_scale: f64,
    pub concept_color: [f64; 3],
    pub reference_color: [f64; 3],
    /// Seeds the weights, positional features and condition tokens.
    pub instance_seed: u64,
}

impl Default for EngineSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 8,
            text_tokens: 8,
            image_tokens: 4,
            blocks: 6,
            heads: 2,
            head_dim: 4,
            planted_block: 4,
            margin: 8.0,
            region: Region {
                row: 4,
                col: 4,
                height: 8,
                width: 8,
            },
            concept_span: ConceptSpan { start: 2, end: 4 },
            latent_mix: 0.1,
            background_value_scale: 0.03,
            concept_color: [0.2, 0.4, 0.9],
            reference_color: [0.95, 0.8, 0.1],
            instance_seed: 0,
        }
    }
}

impl EngineSpec {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Returns the offending key on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.height == 0 || self.width == 0 {
            return Err(("height", "grid extents must be positive".into()));
        }
        if self.channels < FIRST_CONTEXT_CHANNEL {
            return Err((
                "channels",
                format!("need at least {FIRST_CONTEXT_CHANNEL} channels"),
            ));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(("heads", format!("must divide channels ({})", self.channels)));
        }
        if self.head_dim == 0 {
            return Err(("head_dim", "must be positive".into()));
        }
        if self.blocks == 0 {
            return Err(("blocks", "need at least one block".into()));
        }
        if self.planted_block >= self.blocks {
            return Err((
                "planted_block",
                format!("must be < blocks ({})", self.blocks),
            ));
        }
        if self.text_tokens == 0 {
            return Err(("text_tokens", "need at least one text token".into()));
        }
        if self.image_tokens == 0 {
            return Err(("image_tokens", "need at least one image token".into()));
        }
        if self.concept_span.check_within(self.text_tokens).is_err() {
            return Err((
                "concept_span",
                format!(
                    "[{}, {}) must be a non-empty range within {} text tokens",
                    self.concept_span.start, self.concept_span.end, self.text_tokens
                ),
            ));
        }
        let r = self.region;
        let cells = self.positions();
        let inside = r.indicator(self.height, self.width).iter().filter(|&&b| b).count();
        if inside == 0 || inside == cells {
            return Err((
                "region",
                "must cover some but not all latent cells".into(),
            ));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(("margin", "must be a positive finite value".into()));
        }
        if !(self.latent_mix.is_finite() && self.latent_mix >= 0.0) {
            return Err(("latent_mix", "must be a finite value >= 0".into()));
        }
        if !self.background_value_scale.is_finite() {
            return Err(("background_value_scale", "must be finite".into()));
        }
        Ok(())
    }
}

/// Latent of shape `(H·W) x C`, positions row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub data: Matrix,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, data: Matrix) -> Result<Self> {
        if data.rows() != height * width {
            return shape_err(format!(
                "{} latent rows for a {height}x{width} grid",
                data.rows()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.column(c)
    }
}

/// How the image condition enters the attention stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    /// Image condition at scale zero; its maps are still computed.
    TextOnly,
    /// The unmodified adapter at scale `lambda`.
    Vanilla { lambda: f64 },
    Conceptrol(ConceptrolConfig),
    /// Image condition restricted by a fixed spatial mask (0/1 or soft weights).
    OracleMasked { lambda: f64, mask: Vec<f64> },
}

impl Control {
    pub fn label(&self) -> &'static str {
        match self {
            Control::TextOnly => "text_only",
            Control::Vanilla { .. } => "vanilla",
            Control::Conceptrol(_) => "conceptrol",
            Control::OracleMasked { .. } => "oracle_masked",
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Control::TextOnly => 0.0,
            Control::Vanilla { lambda } | Control::OracleMasked { lambda, .. } => *lambda,
            Control::Conceptrol(cfg) => cfg.lambda,
        }
    }
}

/// Attention summaries recorded for one block at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord {
    /// Head-averaged latent→text attention, `N x M`.
    pub text_map: Matrix,
    /// Head-averaged latent→image attention reduced over image tokens, `1 x N`:
    /// the max over tokens for Direct Adding (whose per-token mean is a
    /// constant `1/K`), the mean over tokens for fused attention.
    pub image_map: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub epsilon: Matrix,
    /// `f(cond)`: the clean latent implied by the attention stack.
    pub x0_pred: Matrix,
    pub blocks: Vec<BlockRecord>,
    /// Image-condition share of `x0_pred`, summed over blocks.
    pub image_contribution: Matrix,
    /// Mask extracted at the concept block this timestep.
    pub mask: ConceptMask,
    pub injected: bool,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    spec: EngineSpec,
    mode: AdapterMode,
    blocks: Vec<AttentionBlockWeights>,
    positional: Matrix,
    region: Vec<bool>,
}

impl ToyDenoiser {
    pub fn planted(spec: &EngineSpec, mode: AdapterMode) -> Result<Self> {
        if let Err((key, msg)) = spec.validate() {
            return invalid(format!("engine.{key}: {msg}"));
        }
        let mut prng = Prng::new(spec.instance_seed ^ 0x5EED_B10C);
        let c = spec.channels;
        let d = spec.head_dim;
        let vd = c / spec.heads;
        let mut blocks = Vec::with_capacity(spec.blocks);
        for l in 0..spec.blocks {
            let heads = if l == spec.planted_block {
                planted_heads(spec)
            } else {
                let qk_scale = 1.0 / (d as f64).sqrt();
                let v_scale = spec.background_value_scale / (c as f64).sqrt();
                (0..spec.heads)
                    .map(|_| HeadProjection {
                        query: prng.gaussian_matrix(c, d).scale(qk_scale),
                        key: prng.gaussian_matrix(c, d).scale(qk_scale),
                        value: prng.gaussian_matrix(c, vd).scale(v_scale),
                    })
                    .collect()
            };
            blocks.push(AttentionBlockWeights::new(l, heads)?);
        }
        let n = spec.positions();
        let positional = Matrix::from_fn(n, c, |_, ch| {
            if ch >= FIRST_CONTEXT_CHANNEL {
                prng.next_gaussian()
            } else {
                0.0
            }
        });
        Ok(Self {
            spec: spec.clone(),
            mode,
            blocks,
            positional,
            region: spec.region.indicator(spec.height, spec.width),
        })
    }

    pub fn spec(&self) -> &EngineSpec {
        &self.spec
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn blocks(&self) -> &[AttentionBlockWeights] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut Vec<AttentionBlockWeights> {
        &mut self.blocks
    }

    pub fn planted_block(&self) -> usize {
        self.spec.planted_block
    }

    pub fn planted_region(&self) -> &[bool] {
        &self.region
    }

    pub fn positions(&self) -> usize {
        self.spec.positions()
    }

    /// Query source of block `l` for latent `x_t`.
    pub fn query_source(&self, block: usize, x_t: &Matrix) -> Result<Matrix> {
        if block == self.spec.planted_block {
            let mut q = self.positional.clone();
            for (i, &inside) in self.region.iter().enumerate() {
                if inside {
                    q.set(i, CONCEPT_CHANNEL, 1.0);
                }
            }
            Ok(q)
        } else {
            let mix = self.spec.latent_mix;
            self.positional.zip_with(x_t, |p, x| p + mix * x)
        }
    }

    fn concept_block_for(&self, control: &Control) -> usize {
        match control {
            Control::Conceptrol(cfg) => cfg.concept_block,
            _ => self.spec.planted_block,
        }
    }

    pub fn check_condition(&self, cond: &ConditionSet) -> Result<()> {
        let c = self.spec.channels;
        if cond.text().cols() != c {
            return shape_err(format!("conditions have {} channels, engine {c}", cond.text().cols()));
        }
        if self.mode == AdapterMode::Mm && cond.image().rows() != self.positions() {
            return shape_err(format!(
                "fused mode needs {} image tokens, got {}",
                self.positions(),
                cond.image().rows()
            ));
        }
        Ok(())
    }

    fn check_control(&self, control: &Control) -> Result<()> {
        match control {
            Control::TextOnly => Ok(()),
            Control::Vanilla { lambda } => {
                if lambda.is_nan() || *lambda < 0.0 {
                    return invalid(format!("lambda must be >= 0, got {lambda}"));
                }
                Ok(())
            }
            Control::Conceptrol(cfg) => {
                if let Err((key, msg)) = cfg.validate() {
                    return invalid(format!("conceptrol.{key}: {msg}"));
                }
                if cfg.mode != self.mode {
                    return invalid(format!(
                        "conceptrol.mode {:?} does not match engine mode {:?}",
                        cfg.mode, self.mode
                    ));
                }
                if cfg.concept_block >= self.blocks.len() {
                    return invalid(format!(
                        "conceptrol.concept_block {} out of range for {} blocks",
                        cfg.concept_block,
                        self.blocks.len()
                    ));
                }
                Ok(())
            }
            Control::OracleMasked { lambda, mask } => {
                if lambda.is_nan() || *lambda < 0.0 {
                    return invalid(format!("lambda must be >= 0, got {lambda}"));
                }
                if mask.len() != self.positions() || mask.iter().any(|&m| m.is_nan() || m < 0.0) {
                    return invalid("oracle mask must hold one non-negative weight per latent cell");
                }
                Ok(())
            }
        }
    }
}

fn planted_heads(spec: &EngineSpec) -> Vec<HeadProjection> {
    let c = spec.channels;
    let d = spec.head_dim;
    let vd = c / spec.heads;
    // q·k/√d = margin with q = a·u, k = a·u
    let amplitude = (spec.margin * (d as f64).sqrt()).sqrt();
    let project = Matrix::from_fn(c, d, |ch, k| {
        if ch == CONCEPT_CHANNEL && k == 0 {
            amplitude
        } else {
            0.0
        }
    });
    (0..spec.heads)
        .map(|h| HeadProjection {
            query: project.clone(),
            key: project.clone(),
            value: Matrix::from_fn(c, vd, |ch, o| if ch == h * vd + o { 1.0 } else { 0.0 }),
        })
        .collect()
}

/// Seeded text and image tokens for a toy instance.
pub fn toy_conditions(spec: &EngineSpec, mode: AdapterMode) -> Result<ConditionSet> {
    let mut prng = Prng::new(spec.instance_seed ^ 0xC0DD_1710);
    let c = spec.channels;
    let span = spec.concept_span;
    let text = Matrix::from_fn(spec.text_tokens, c, |i, ch| {
        if RGB_CHANNELS.contains(&ch) {
            if span.contains(i) {
                spec.concept_color[ch]
            } else {
                prng.next_uniform()
            }
        } else if ch == CONCEPT_CHANNEL {
            if span.contains(i) {
                1.0
            } else {
                0.0
            }
        } else {
            prng.next_gaussian()
        }
    });
    let image_rows = match mode {
        AdapterMode::Direct => spec.image_tokens,
        AdapterMode::Mm => spec.positions(),
    };
    let image = Matrix::from_fn(image_rows, c, |_, ch| {
        if RGB_CHANNELS.contains(&ch) {
            spec.reference_color[ch] + 0.05 * prng.next_gaussian()
        } else if ch == CONCEPT_CHANNEL {
            0.0
        } else {
            prng.next_gaussian()
        }
    });
    ConditionSet::new(text, image, span)
}

fn head_mean(map: &[Matrix]) -> Result<Matrix> {
    mean_over(map, &[Axis::Head])
}

fn row_max(m: &Matrix) -> Matrix {
    Matrix::row_vector(
        (0..m.rows())
            .map(|i| m.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    )
}

fn row_mean(m: &Matrix) -> Matrix {
    Matrix::row_vector(
        (0..m.rows())
            .map(|i| m.row(i).iter().sum::<f64>() / m.cols() as f64)
            .collect(),
    )
}

/// One denoiser evaluation: runs every block, extracts the concept mask at
/// the concept block and converts the clean-latent prediction into `ε̂`.
pub fn denoiser_forward(
    x_t: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    cond: &ConditionSet,
    control: &Control,
    d: &ToyDenoiser,
    cache: &mut MaskCache,
) -> Result<ForwardOutput> {
    let total = schedule.total_steps();
    if t == 0 || t > total {
        return invalid(format!("timestep {t} outside 1..={total}"));
    }
    d.check_condition(cond)?;
    d.check_control(control)?;
    let x = &x_t.data;
    if x.shape() != (d.positions(), d.spec.channels) {
        return shape_err(format!(
            "latent is {:?}, engine expects {}x{}",
            x.shape(),
            d.positions(),
            d.spec.channels
        ));
    }
    let step_index = total - t + 1;
    let inject = match control {
        Control::TextOnly => false,
        Control::Conceptrol(cfg) => warmup_gate(step_index, total, cfg) == Gate::Inject,
        _ => true,
    };
    let concept_block = d.concept_block_for(control);
    let span = cond.span();
    let text_len = cond.text().rows();
    let n = d.positions();
    let layout = FusedLayout::new(text_len, n);

    cache.begin_timestep();
    let mut x0_pred = Matrix::zeros(n, d.spec.channels);
    let mut image_contribution = Matrix::zeros(n, d.spec.channels);
    let mut records = Vec::with_capacity(d.blocks.len());
    let mut biases: [Option<BiasMatrix>; 2] = [None, None];
    let mut probe_bias: Option<BiasMatrix> = None;

    for (l, w) in d.blocks.iter().enumerate() {
        let q = d.query_source(l, x)?;
        let out: AttentionOutput = match d.mode {
            AdapterMode::Direct => {
                if l == concept_block {
                    let text = cross_attention(&q, cond.text(), w)?;
                    let mask = extract_mask_direct(&text.map, span)?.with_source(l, t);
                    cache.record(mask);
                }
                match (control, inject) {
                    (Control::Conceptrol(cfg), true) => {
                        let mask = mask_for_block(l, concept_block, cache);
                        conceptrol_direct_adding(&q, cond.text(), cond.image(), w, cfg.lambda, mask)?
                    }
                    (Control::OracleMasked { lambda, mask }, true) => masked_direct_adding(
                        &q,
                        cond.text(),
                        cond.image(),
                        w,
                        *lambda,
                        Some(mask),
                    )?,
                    (_, true) => direct_adding(&q, cond.text(), cond.image(), w, control.lambda())?,
                    (_, false) => direct_adding(&q, cond.text(), cond.image(), w, 0.0)?,
                }
            }
            AdapterMode::Mm => {
                let concept_injected = matches!(control, Control::Conceptrol(_)) && inject;
                if l == concept_block && concept_injected {
                    // the fused map depends on the bias, so read the mask from
                    // a pass under the unmodified bias first
                    let probe_bias = probe_bias.get_or_insert_with(|| {
                        build_bias_vanilla(control.lambda(), text_len, n)
                    });
                    let probe =
                        mm_attention_latent_rows(&q, cond.text(), cond.image(), w, probe_bias)?;
                    let mask = extract_mask_mm_latent_rows(&probe.map, span)?.with_source(l, t);
                    cache.record(mask);
                }
                // one bias serves every block ahead of the concept block and
                // another every block from it on
                let slot = usize::from(concept_injected && l >= concept_block);
                if biases[slot].is_none() {
                    biases[slot] = Some(match (control, inject) {
                        (Control::Conceptrol(cfg), true) => {
                            let mask = mask_for_block(l, concept_block, cache);
                            conceptrol_bias(cfg, span, mask, text_len, n)?
                        }
                        (Control::OracleMasked { lambda, mask }, true) => {
                            assemble_masked_bias(*lambda, mask, None, text_len, n)?
                        }
                        (_, true) => build_bias_vanilla(control.lambda(), text_len, n),
                        (_, false) => build_bias_vanilla(0.0, text_len, n),
                    });
                }
                let bias = biases[slot].as_ref().expect("filled above");
                let out = mm_attention_latent_rows(&q, cond.text(), cond.image(), w, bias)?;
                if l == concept_block && !concept_injected {
                    let mask = extract_mask_mm_latent_rows(&out.map, span)?.with_source(l, t);
                    cache.record(mask);
                }
                out
            }
        };

        let mean_map = head_mean(&out.map)?;
        let record = match d.mode {
            AdapterMode::Direct => {
                let image_map = out
                    .image_map
                    .as_ref()
                    .expect("direct adding keeps the image map");
                BlockRecord {
                    text_map: mean_map,
                    image_map: row_max(&head_mean(image_map)?),
                }
            }
            AdapterMode::Mm => BlockRecord {
                text_map: mean_map.slice_cols(layout.text())?,
                image_map: row_mean(&mean_map.slice_cols(layout.image())?),
            },
        };
        records.push(record);
        x0_pred.add_assign(&out.values)?;
        if let Some(ic) = &out.image_contribution {
            image_contribution.add_assign(ic)?;
        }
    }

    let mask = cache
        .latest
        .clone()
        .expect("concept block is validated to exist");
    let alpha_bar = schedule.alpha_bar(t);
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    let epsilon = x.zip_with(&x0_pred, |xt, f| (xt - signal * f) / noise)?;
    Ok(ForwardOutput {
        epsilon,
        x0_pred,
        blocks: records,
        image_contribution,
        mask,
        injected: inject,
    })
}
