pub mod checkpoint;
pub mod cmb;
pub mod error;
pub mod eval;
pub mod mcu;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod toyworld;
pub mod train;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use mcu::{GuidanceEncoder, GuidanceEncoderConfig, McuNet};
pub use nn::ParamStore;
pub use schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use tensor::{DType, Element, ElementwiseOp, Graph, ResampleDir, Tensor, Var};
pub use toyworld::{Modality, Scene, SceneConfig};
pub use unet::{Denoiser, DenoiserOutput, UNetConfig};
