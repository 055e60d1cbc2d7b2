//! Desk-scale next-scale prediction: scale schedule, residual quantizer, the
//! toy predictor with guidance, and the unaccelerated generation loop.
//!
//! The running feature `F_k` always lives at the full grid. At scale `k` the
//! predictor maps `F̃_{k−1}` (at grid `k`) to `F_k^o`, which is quantized to
//! tokens `R_k`; their codewords are upsampled and added to `F_{k−1}`, and
//! the sum is downsampled to grid `k+1` to form the next input.

mod decode;
mod generate;
mod predictor;
mod quantizer;
mod schedule;
mod trace;

pub use decode::{decode_to_image, Raster, DECODER_SEED, MID_GRAY};
pub use generate::{ModelSpec, Residual, StepOutput, VanillaPrefix, VarModel, DEFAULT_GUIDANCE};
pub use predictor::{cfg_combine, Condition, FlopCount, Predictor, PredictorConfig};
pub use quantizer::{encode_multiscale, quantize, residual_gain, Codebook, EncodedScale};
pub use schedule::{ScaleSchedule, DESK_REFINEMENT_START, DESK_SIDES};
pub use trace::{GenerationTrace, ScaleRecord, ScaleTiming, TraceTotals, TruncationCheck};
