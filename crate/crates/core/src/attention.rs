//! Baseline adapter attention: decoupled cross-attention with Direct Adding
//! (IP-Adapter style) and fused multi-modal attention with an additive
//! pre-softmax bias (OminiControl style).
//!
//! Token matrices are row-major with one token per row, so a projection is
//! `tokens · W` with `W` of shape `C x d`.

use std::ops::Range;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{floored_ln, matmul, matmul_transposed, softmax_in_place, Matrix};

/// Half-open range `[start, end)` of concept tokens inside the text condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConceptSpan {
    pub start: usize,
    pub end: usize,
}

impl ConceptSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return invalid(format!("empty concept span [{start}, {end})"));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    /// Fails unless the span is non-empty and lies within `text_len` tokens.
    pub fn check_within(&self, text_len: usize) -> Result<()> {
        if self.start >= self.end {
            return invalid(format!("empty concept span [{}, {})", self.start, self.end));
        }
        if self.end > text_len {
            return invalid(format!(
                "concept span [{}, {}) exceeds {text_len} text tokens",
                self.start, self.end
            ));
        }
        Ok(())
    }
}

/// Text tokens, image-condition tokens and the concept span within the text.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    text: Matrix,
    image: Matrix,
    span: ConceptSpan,
}

impl ConditionSet {
    pub fn new(text: Matrix, image: Matrix, span: ConceptSpan) -> Result<Self> {
        span.check_within(text.rows())?;
        if text.cols() != image.cols() {
            return shape_err(format!(
                "text tokens have {} channels, image tokens {}",
                text.cols(),
                image.cols()
            ));
        }
        Ok(Self { text, image, span })
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    pub fn image(&self) -> &Matrix {
        &self.image
    }

    pub fn span(&self) -> ConceptSpan {
        self.span
    }

    /// The concept tokens `c_text[i_s..i_e]`.
    pub fn concept(&self) -> Matrix {
        self.text
            .slice_rows(self.span.range())
            .expect("span validated at construction")
    }
}

/// Projections for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    /// `C x d`
    pub query: Matrix,
    /// `C x d`
    pub key: Matrix,
    /// `C x C/h`
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockWeights {
    block_id: usize,
    head_dim: usize,
    model_dim: usize,
    heads: Vec<HeadProjection>,
}

impl AttentionBlockWeights {
    pub fn new(block_id: usize, heads: Vec<HeadProjection>) -> Result<Self> {
        let first = match heads.first() {
            Some(h) => h,
            None => return invalid("attention block needs at least one head"),
        };
        let model_dim = first.query.rows();
        let head_dim = first.query.cols();
        if head_dim == 0 {
            return invalid("head_dim must be positive");
        }
        let value_dim = first.value.cols();
        for h in &heads {
            if h.query.shape() != (model_dim, head_dim) || h.key.shape() != (model_dim, head_dim) {
                return shape_err(format!(
                    "block {block_id}: every head needs {model_dim}x{head_dim} query/key projections"
                ));
            }
            if h.value.shape() != (model_dim, value_dim) {
                return shape_err(format!(
                    "block {block_id}: every head needs a {model_dim}x{value_dim} value projection"
                ));
            }
        }
        Ok(Self {
            block_id,
            head_dim,
            model_dim,
            heads,
        })
    }

    pub fn block_id(&self) -> usize {
        self.block_id
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn heads(&self) -> &[HeadProjection] {
        &self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    fn check_tokens(&self, what: &str, m: &Matrix) -> Result<()> {
        if m.cols() != self.model_dim {
            return shape_err(format!(
                "{what} has {} channels, block {} expects {}",
                m.cols(),
                self.block_id,
                self.model_dim
            ));
        }
        Ok(())
    }
}

/// Attention values together with the post-softmax maps that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `positions x (heads · C/h)`
    pub values: Matrix,
    /// Per-head `positions x keys` map. For Direct Adding this is the text
    /// branch; for fused attention the full fused map.
    pub map: Vec<Matrix>,
    /// Per-head image-branch map (Direct Adding only).
    pub image_map: Option<Vec<Matrix>>,
    /// The share of `values` contributed by the image condition.
    pub image_contribution: Option<Matrix>,
}

/// `Softmax((x W_q)(c W_k)ᵀ / √d) · c W_v` per head, heads concatenated.
pub fn cross_attention(x: &Matrix, c: &Matrix, w: &AttentionBlockWeights) -> Result<AttentionOutput> {
    w.check_tokens("latent", x)?;
    w.check_tokens("condition", c)?;
    if c.rows() == 0 {
        return invalid("cross-attention over zero condition tokens");
    }
    let scale = w.scale();
    let mut maps = Vec::with_capacity(w.head_count());
    let mut head_values = Vec::with_capacity(w.head_count());
    for head in w.heads() {
        let q = matmul(x, &head.query)?;
        let k = matmul(c, &head.key)?;
        let v = matmul(c, &head.value)?;
        let mut map = matmul_transposed(&q, &k)?;
        for i in 0..map.rows() {
            let row = map.row_mut(i);
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_in_place(row);
        }
        head_values.push(matmul(&map, &v)?);
        maps.push(map);
    }
    let refs: Vec<&Matrix> = head_values.iter().collect();
    Ok(AttentionOutput {
        values: Matrix::hstack(&refs)?,
        map: maps,
        image_map: None,
        image_contribution: None,
    })
}

/// Direct Adding: `Attn(x, c_text) + λ · Attn(x, c_image)`.
///
/// Both branch maps are kept. At `λ = 0` the returned values are exactly the
/// text-branch values.
pub fn direct_adding(
    x: &Matrix,
    c_text: &Matrix,
    c_image: &Matrix,
    w: &AttentionBlockWeights,
    lambda: f64,
) -> Result<AttentionOutput> {
    masked_direct_adding(x, c_text, c_image, w, lambda, None)
}

/// Direct Adding with the image branch scaled per latent position by
/// `weights` (broadcast across channels). `None` means all ones.
pub(crate) fn masked_direct_adding(
    x: &Matrix,
    c_text: &Matrix,
    c_image: &Matrix,
    w: &AttentionBlockWeights,
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<AttentionOutput> {
    if lambda.is_nan() || lambda < 0.0 {
        return invalid(format!("conditioning scale must be >= 0, got {lambda}"));
    }
    if let Some(weights) = weights {
        if weights.len() != x.rows() {
            return shape_err(format!(
                "spatial mask has {} entries for {} latent positions",
                weights.len(),
                x.rows()
            ));
        }
    }
    let text = cross_attention(x, c_text, w)?;
    let image = cross_attention(x, c_image, w)?;
    let mut contribution = image.values;
    for i in 0..contribution.rows() {
        let factor = weights.map_or(lambda, |m| lambda * m[i]);
        contribution.row_mut(i).iter_mut().for_each(|v| *v *= factor);
    }
    let values = if lambda == 0.0 {
        text.values
    } else {
        text.values.add(&contribution)?
    };
    Ok(AttentionOutput {
        values,
        map: text.map,
        image_map: Some(image.map),
        image_contribution: Some(contribution),
    })
}

/// Index layout of the fused token sequence `[text, latent, image]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedLayout {
    pub text_len: usize,
    pub latent_len: usize,
}

impl FusedLayout {
    pub fn new(text_len: usize, latent_len: usize) -> Self {
        Self {
            text_len,
            latent_len,
        }
    }

    pub fn total(&self) -> usize {
        self.text_len + 2 * self.latent_len
    }

    pub fn text(&self) -> Range<usize> {
        0..self.text_len
    }

    pub fn latent(&self) -> Range<usize> {
        self.text_len..self.text_len + self.latent_len
    }

    pub fn image(&self) -> Range<usize> {
        self.text_len + self.latent_len..self.total()
    }
}

/// Additive pre-softmax bias over the fused tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    layout: FusedLayout,
    matrix: Matrix,
}

impl BiasMatrix {
    pub fn zeros(layout: FusedLayout) -> Self {
        Self {
            layout,
            matrix: Matrix::zeros(layout.total(), layout.total()),
        }
    }

    pub fn from_matrix(layout: FusedLayout, matrix: Matrix) -> Result<Self> {
        if matrix.shape() != (layout.total(), layout.total()) {
            return shape_err(format!(
                "bias is {:?}, fused layout needs {}x{}",
                matrix.shape(),
                layout.total(),
                layout.total()
            ));
        }
        Ok(Self { layout, matrix })
    }

    pub fn layout(&self) -> FusedLayout {
        self.layout
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub(crate) fn fill_block(&mut self, rows: Range<usize>, cols: Range<usize>, value: f64) {
        for i in rows {
            for j in cols.clone() {
                self.matrix.set(i, j, value);
            }
        }
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, value: f64) {
        self.matrix.set(i, j, value);
    }
}

/// `B(λ)`: `log λ` on the latent→image and image→latent blocks, zero elsewhere.
pub fn build_bias_vanilla(lambda: f64, text_len: usize, latent_len: usize) -> BiasMatrix {
    let layout = FusedLayout::new(text_len, latent_len);
    let mut bias = BiasMatrix::zeros(layout);
    let log_lambda = floored_ln(lambda);
    bias.fill_block(layout.latent(), layout.image(), log_lambda);
    bias.fill_block(layout.image(), layout.latent(), log_lambda);
    bias
}

/// Multi-modal attention over `[c_text; x; c_image]` with an additive bias.
pub fn mm_attention(
    x: &Matrix,
    c_text: &Matrix,
    c_image: &Matrix,
    w: &AttentionBlockWeights,
    bias: &BiasMatrix,
) -> Result<AttentionOutput> {
    let layout = fused_layout(x, c_text, c_image, bias)?;
    let fused = Matrix::vstack(&[c_text, x, c_image])?;
    fused_attention(&fused, w, bias, 0..layout.total())
}

/// Like [`mm_attention`] but evaluates only the latent query rows; the map has
/// shape `N x (M + 2N)` per head.
pub fn mm_attention_latent_rows(
    x: &Matrix,
    c_text: &Matrix,
    c_image: &Matrix,
    w: &AttentionBlockWeights,
    bias: &BiasMatrix,
) -> Result<AttentionOutput> {
    let layout = fused_layout(x, c_text, c_image, bias)?;
    let fused = Matrix::vstack(&[c_text, x, c_image])?;
    fused_attention(&fused, w, bias, layout.latent())
}

fn fused_layout(
    x: &Matrix,
    c_text: &Matrix,
    c_image: &Matrix,
    bias: &BiasMatrix,
) -> Result<FusedLayout> {
    if x.rows() != c_image.rows() {
        return shape_err(format!(
            "fused attention needs as many image tokens as latent tokens ({} vs {})",
            c_image.rows(),
            x.rows()
        ));
    }
    let layout = FusedLayout::new(c_text.rows(), x.rows());
    if bias.layout() != layout {
        return shape_err(format!(
            "bias built for {:?}, inputs have {:?}",
            bias.layout(),
            layout
        ));
    }
    Ok(layout)
}

fn fused_attention(
    fused: &Matrix,
    w: &AttentionBlockWeights,
    bias: &BiasMatrix,
    query_rows: Range<usize>,
) -> Result<AttentionOutput> {
    w.check_tokens("fused tokens", fused)?;
    let layout = bias.layout();
    let queries = fused.slice_rows(query_rows.clone())?;
    let scale = w.scale();
    let image_cols = layout.image();
    let mut maps = Vec::with_capacity(w.head_count());
    let mut head_values = Vec::with_capacity(w.head_count());
    let mut head_image = Vec::with_capacity(w.head_count());
    for head in w.heads() {
        let q = matmul(&queries, &head.query)?;
        let k = matmul(fused, &head.key)?;
        let v = matmul(fused, &head.value)?;
        let mut map = matmul_transposed(&q, &k)?;
        for (r, i) in query_rows.clone().enumerate() {
            let bias_row = bias.matrix().row(i);
            let row = map.row_mut(r);
            for (s, b) in row.iter_mut().zip(bias_row) {
                *s = *s * scale + b;
            }
            softmax_in_place(row);
        }
        head_values.push(matmul(&map, &v)?);
        let image_part = matmul(
            &map.slice_cols(image_cols.clone())?,
            &v.slice_rows(image_cols.clone())?,
        )?;
        head_image.push(image_part);
        maps.push(map);
    }
    let values: Vec<&Matrix> = head_values.iter().collect();
    let image: Vec<&Matrix> = head_image.iter().collect();
    Ok(AttentionOutput {
        values: Matrix::hstack(&values)?,
        map: maps,
        image_map: None,
        image_contribution: Some(Matrix::hstack(&image)?),
    })
}

/// Total attention mass that latent query rows place on image columns,
/// summed over heads and rows.
pub fn latent_to_image_mass(map: &[Matrix], layout: FusedLayout) -> f64 {
    map.iter()
        .map(|m| {
            layout
                .latent()
                .map(|i| m.row(i)[layout.image()].iter().sum::<f64>())
                .sum::<f64>()
        })
        .sum()
}
