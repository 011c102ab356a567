//! Deterministic miniature DDPM engine with a planted-concept attention stack.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{
    denoiser_forward, toy_conditions, BlockRecord, Control, EngineSpec, ForwardOutput, LatentGrid,
    Region, ToyDenoiser, CONCEPT_CHANNEL, FIRST_CONTEXT_CHANNEL, RGB_CHANNELS,
};
pub use sampler::{
    concept_row, ddpm_step, dump_head_maps, generate, image_leakage, in_region_share, render_rgb,
    GenerationTrace, StepRecord,
};
pub use schedule::NoiseSchedule;
