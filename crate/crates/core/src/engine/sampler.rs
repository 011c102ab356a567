use std::fs;
use std::path::Path;

use crate::attention::ConceptSpan;
use crate::control::{AdapterMode, ConceptMask, MaskCache};
use crate::error::{invalid, Error, Result};
use crate::io::{quantize_unit, write_tensor, RgbImage, Tensor};
use crate::numerics::{Matrix, Prng};

use super::denoiser::{denoiser_forward, BlockRecord, Control, LatentGrid, ToyDenoiser};
use super::NoiseSchedule;
use crate::attention::ConditionSet;

/// One reverse step: `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, plus `√β_t·z` except at `t = 1`.
pub fn ddpm_step(
    x_t: &Matrix,
    t: usize,
    epsilon_hat: &Matrix,
    schedule: &NoiseSchedule,
    prng: &mut Prng,
) -> Result<Matrix> {
    if t == 0 || t > schedule.total_steps() {
        return invalid(format!("timestep {t} outside 1..={}", schedule.total_steps()));
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let mean = x_t.zip_with(epsilon_hat, |x, e| (x - coef * e) * inv_sqrt_alpha)?;
    if t == 1 {
        return Ok(mean);
    }
    let std = schedule.sigma(t).sqrt();
    let mut next = mean;
    for v in next.data_mut() {
        *v += std * prng.next_gaussian();
    }
    Ok(next)
}

/// Everything recorded at one denoising step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub timestep: usize,
    /// Latent entering this step.
    pub latent: Matrix,
    pub x0_pred: Matrix,
    pub blocks: Vec<BlockRecord>,
    pub mask: ConceptMask,
    pub image_contribution: Matrix,
    pub injected: bool,
}

#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub mode: AdapterMode,
    pub span: ConceptSpan,
    pub height: usize,
    pub width: usize,
    /// Ordered from `t = T` down to `t = 1`.
    pub steps: Vec<StepRecord>,
    pub final_latent: Matrix,
}

impl GenerationTrace {
    pub fn block_count(&self) -> usize {
        self.steps.first().map_or(0, |s| s.blocks.len())
    }

    /// Latent after `k` steps (1-based); `k = 0` is `x_T`.
    pub fn latent_after_step(&self, k: usize) -> Option<&Matrix> {
        if k < self.steps.len() {
            Some(&self.steps[k].latent)
        } else if k == self.steps.len() {
            Some(&self.final_latent)
        } else {
            None
        }
    }

    pub fn final_step(&self) -> Option<&StepRecord> {
        self.steps.last()
    }

    /// Writes `latent_t{t}.ctrl` for `t = T..0`, `attn_t{t}_l{l}.ctrl` holding
    /// the concept row and the image row as `[2, H, W]`, and `mask_t{t}.ctrl`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (h, w) = (self.height, self.width);
        for step in &self.steps {
            let t = step.timestep;
            write_tensor(&dir.join(format!("latent_t{t}.ctrl")), &Tensor::from(&step.latent))?;
            for (l, block) in step.blocks.iter().enumerate() {
                let concept = concept_row(&block.text_map, self.span)?;
                let mut data = concept;
                data.extend_from_slice(block.image_map.data());
                write_tensor(
                    &dir.join(format!("attn_t{t}_l{l}.ctrl")),
                    &Tensor::new(vec![2, h, w], data)?,
                )?;
            }
            write_tensor(
                &dir.join(format!("mask_t{t}.ctrl")),
                &Tensor::new(vec![h, w], step.mask.values().to_vec())?,
            )?;
        }
        write_tensor(&dir.join("latent_t0.ctrl"), &Tensor::from(&self.final_latent))?;
        Ok(())
    }
}

/// Mean over the concept-token columns of a head-averaged `N x M` map.
pub fn concept_row(text_map: &Matrix, span: ConceptSpan) -> Result<Vec<f64>> {
    span.check_within(text_map.cols())?;
    let k = span.len() as f64;
    Ok((0..text_map.rows())
        .map(|i| text_map.row(i)[span.range()].iter().sum::<f64>() / k)
        .collect())
}

/// Writes per-head maps of one block as `attn_t{t}_l{l}_h{h}.ctrl`.
pub fn dump_head_maps(dir: &Path, timestep: usize, block: usize, maps: &[Matrix]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (h, m) in maps.iter().enumerate() {
        write_tensor(
            &dir.join(format!("attn_t{timestep}_l{block}_h{h}.ctrl")),
            &Tensor::from(m),
        )?;
    }
    Ok(())
}

pub fn generate(
    cond: &ConditionSet,
    control: &Control,
    d: &ToyDenoiser,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(LatentGrid, GenerationTrace)> {
    let spec = d.spec();
    let n = d.positions();
    let mut prng = Prng::new(seed);
    let mut x = LatentGrid::new(spec.height, spec.width, prng.gaussian_matrix(n, spec.channels))?;
    let mut cache = MaskCache::new(n, d.mode().normalization());
    let mut steps = Vec::with_capacity(schedule.total_steps());
    for t in (1..=schedule.total_steps()).rev() {
        let out = denoiser_forward(&x, t, schedule, cond, control, d, &mut cache)?;
        let next = ddpm_step(&x.data, t, &out.epsilon, schedule, &mut prng)?;
        steps.push(StepRecord {
            timestep: t,
            latent: std::mem::replace(&mut x.data, next),
            x0_pred: out.x0_pred,
            blocks: out.blocks,
            mask: out.mask,
            image_contribution: out.image_contribution,
            injected: out.injected,
        });
    }
    let trace = GenerationTrace {
        mode: d.mode(),
        span: cond.span(),
        height: spec.height,
        width: spec.width,
        steps,
        final_latent: x.data.clone(),
    };
    Ok((x, trace))
}

/// First three channels clamped to `[0, 1]` and quantized.
pub fn render_rgb(x: &LatentGrid) -> Result<RgbImage> {
    if x.channels() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rendering needs 3 channels, latent has {}",
            x.channels()
        )));
    }
    let pixels = (0..x.data.rows())
        .map(|i| {
            let r = x.data.row(i);
            [quantize_unit(r[0]), quantize_unit(r[1]), quantize_unit(r[2])]
        })
        .collect();
    Ok(RgbImage {
        width: x.width,
        height: x.height,
        pixels,
    })
}

/// Mean absolute image-condition contribution over cells outside `region`.
pub fn image_leakage(contribution: &Matrix, region: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &inside) in region.iter().enumerate() {
        if !inside {
            total += contribution.row(i).iter().map(|v| v.abs()).sum::<f64>();
            count += contribution.cols();
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fraction of the absolute image-condition contribution landing inside `region`.
pub fn in_region_share(contribution: &Matrix, region: &[bool]) -> f64 {
    let mut inside = 0.0;
    let mut all = 0.0;
    for (i, &r) in region.iter().enumerate() {
        let s: f64 = contribution.row(i).iter().map(|v| v.abs()).sum();
        all += s;
        if r {
            inside += s;
        }
    }
    if all > 0.0 {
        inside / all
    } else {
        0.0
    }
}
