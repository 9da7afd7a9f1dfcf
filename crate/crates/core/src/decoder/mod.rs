//! Fixed-canvas masked-diffusion decoding.

mod canvas;
mod decode;
mod schedule;

pub use canvas::Canvas;
pub use decode::{
    commit_from_logits, decode, denoise_step, eos_truncate, init_canvas, DecodeConfig, DecodeMode,
    DecodeTrace, StepRecord, TraceRecord,
};
pub use schedule::{build_schedule, Schedule, ScheduleMode};
