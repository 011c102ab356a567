//! Localization analysis: map normalization, rank AUC against oracle masks,
//! concept-block discovery and the masked-transfer experiment.

use std::fmt::Write as _;

use crate::attention::{ConceptSpan, ConditionSet};
use crate::engine::{
    concept_row, generate, Control, GenerationTrace, LatentGrid, NoiseSchedule, ToyDenoiser,
    CONCEPT_CHANNEL,
};
use crate::error::{Error, Result};
use crate::io::map_to_pgm;
use crate::numerics::Matrix;

/// Threshold on the concept channel used to segment a rendered latent.
pub const SEGMENTATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleSource {
    Planted,
    Segmented,
}

/// Binary reference region with at least one positive and one negative cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleMask {
    values: Vec<bool>,
    source: OracleSource,
}

impl OracleMask {
    pub fn new(values: Vec<bool>, source: OracleSource) -> Result<Self> {
        let positives = values.iter().filter(|&&v| v).count();
        if positives == 0 || positives == values.len() {
            return Err(Error::DegenerateOracle(format!(
                "{positives} of {} cells positive",
                values.len()
            )));
        }
        Ok(Self { values, source })
    }

    pub fn planted(d: &ToyDenoiser) -> Result<Self> {
        Self::new(d.planted_region().to_vec(), OracleSource::Planted)
    }

    /// Cells whose concept channel exceeds [`SEGMENTATION_THRESHOLD`].
    pub fn segment(x: &LatentGrid) -> Result<Self> {
        if x.channels() <= CONCEPT_CHANNEL {
            return Err(Error::InvalidArgument(format!(
                "segmentation reads channel {CONCEPT_CHANNEL}, latent has {}",
                x.channels()
            )));
        }
        let values = x
            .channel(CONCEPT_CHANNEL)
            .into_iter()
            .map(|v| v > SEGMENTATION_THRESHOLD)
            .collect();
        Self::new(values, OracleSource::Segmented)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn source(&self) -> OracleSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_scores(&self) -> Matrix {
        Matrix::row_vector(self.values.iter().map(|&v| f64::from(u8::from(v))).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMap {
    pub map: Matrix,
    /// Set when the input was constant and the output is all zeros.
    pub degenerate: bool,
}

/// Affine rescale to `[0, 1]`.
pub fn normalize_map(map: &Matrix) -> NormalizedMap {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 || span.is_infinite() {
        return NormalizedMap {
            map: Matrix::zeros(map.rows(), map.cols()),
            degenerate: true,
        };
    }
    NormalizedMap {
        map: map.map(|v| (v - lo) / span),
        degenerate: false,
    }
}

/// Mann–Whitney AUC with midranks for ties.
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateOracle(
            "AUC needs positive and negative cells".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their average
        let midrank = (i + 1 + j) as f64 / 2.0;
        let tied_positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j;
    }
    let p = positives as f64;
    let q = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn auc(map: &Matrix, oracle: &OracleMask) -> Result<f64> {
    auc_scores(map.data(), oracle.values())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanEntry {
    pub block: usize,
    pub timestep: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSummary {
    pub block: usize,
    pub mean_auc: f64,
    /// 1 is best.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockScanReport {
    pub entries: Vec<ScanEntry>,
    /// `(timestep, block)` with the highest AUC at that timestep.
    pub best_per_timestep: Vec<(usize, usize)>,
    /// Sorted by rank.
    pub summary: Vec<BlockSummary>,
}

impl BlockScanReport {
    pub fn best_block(&self) -> usize {
        self.summary[0].block
    }

    pub fn mean_auc(&self, block: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.block == block)
            .map(|s| s.mean_auc)
    }

    pub fn entries_csv(&self) -> String {
        let mut out = String::from("block,timestep,auc\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.block, e.timestep, e.auc);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("block,mean_auc,rank\n");
        for s in &self.summary {
            let _ = writeln!(out, "{},{},{}", s.block, s.mean_auc, s.rank);
        }
        out
    }
}

/// AUC of every block's concept map at every timestep; blocks ranked by mean AUC.
pub fn scan_blocks(
    trace: &GenerationTrace,
    span: ConceptSpan,
    oracle: &OracleMask,
) -> Result<BlockScanReport> {
    let blocks = trace.block_count();
    if trace.steps.is_empty() || blocks == 0 {
        return Err(Error::MissingTrace("trace holds no attention maps".into()));
    }
    let mut entries = Vec::with_capacity(trace.steps.len() * blocks);
    let mut best_per_timestep = Vec::with_capacity(trace.steps.len());
    let mut sums = vec![0.0; blocks];
    for step in &trace.steps {
        if step.blocks.len() != blocks {
            return Err(Error::MissingTrace(format!(
                "timestep {} has {} blocks, expected {blocks}",
                step.timestep,
                step.blocks.len()
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for (l, record) in step.blocks.iter().enumerate() {
            let row = Matrix::row_vector(concept_row(&record.text_map, span)?);
            let value = auc(&normalize_map(&row).map, oracle)?;
            sums[l] += value;
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((l, value));
            }
            entries.push(ScanEntry {
                block: l,
                timestep: step.timestep,
                auc: value,
            });
        }
        best_per_timestep.push((step.timestep, best.expect("at least one block").0));
    }
    let steps = trace.steps.len() as f64;
    let mut summary: Vec<BlockSummary> = sums
        .iter()
        .enumerate()
        .map(|(block, s)| BlockSummary {
            block,
            mean_auc: s / steps,
            rank: 0,
        })
        .collect();
    summary.sort_by(|a, b| b.mean_auc.total_cmp(&a.mean_auc).then(a.block.cmp(&b.block)));
    for (i, s) in summary.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(BlockScanReport {
        entries,
        best_per_timestep,
        summary,
    })
}

/// Highest AUC of the image-condition maps over all blocks and timesteps.
/// Meaningful on traces generated with the image condition at scale zero.
pub fn image_condition_auc(trace: &GenerationTrace, oracle: &OracleMask) -> Result<f64> {
    let mut best: Option<f64> = None;
    for step in &trace.steps {
        for record in &step.blocks {
            let value = auc(&record.image_map, oracle)?;
            best = Some(best.map_or(value, |b: f64| b.max(value)));
        }
    }
    best.ok_or_else(|| Error::MissingTrace("trace holds no image-condition maps".into()))
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub auc: f64,
    pub concept_mask: OracleMask,
    /// Segmentation of the image-conditioned result; `None` if it came out empty or full.
    pub fused_mask: Option<Vec<bool>>,
    pub text_only: LatentGrid,
    pub fused: LatentGrid,
}

/// Segments a text-only run, regenerates with the image condition confined to
/// that segment and scores the new segmentation against the first.
pub fn transfer_experiment(
    cond: &ConditionSet,
    lambda: f64,
    d: &ToyDenoiser,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<TransferOutcome> {
    let (text_only, _) = generate(cond, &Control::TextOnly, d, schedule, seed)?;
    let concept_mask = OracleMask::segment(&text_only)?;
    let weights = concept_mask
        .values()
        .iter()
        .map(|&v| f64::from(u8::from(v)))
        .collect();
    let control = Control::OracleMasked {
        lambda,
        mask: weights,
    };
    let (fused, _) = generate(cond, &control, d, schedule, seed)?;
    let fused_cells: Vec<bool> = fused
        .channel(CONCEPT_CHANNEL)
        .into_iter()
        .map(|v| v > SEGMENTATION_THRESHOLD)
        .collect();
    let scores: Vec<f64> = fused_cells.iter().map(|&v| f64::from(u8::from(v))).collect();
    let value = auc_scores(&scores, concept_mask.values())?;
    let positives = fused_cells.iter().filter(|&&v| v).count();
    let fused_mask = (positives != 0 && positives != fused_cells.len()).then_some(fused_cells);
    Ok(TransferOutcome {
        auc: value,
        concept_mask,
        fused_mask,
        text_only,
        fused,
    })
}

pub fn mask_to_pgm(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    map_to_pgm(values, width, height)
}
