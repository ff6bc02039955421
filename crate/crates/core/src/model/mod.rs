//! Networks shared by the student and the teacher: waveform extractor,
//! convolutional positional encoding, transformer blocks, projection head
//! and the optional convolutional decoder.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod nn;
pub mod params;

pub use config::{BackboneStyle, ModelConfig, TargetNorm};
pub use forward::{
    encode_student, encode_teacher, encoder_layers, extract_features, FrameSequence, StudentOutput,
    TeacherTargets,
};
pub use nn::Mat;
pub use params::{ParamGroup, Parameters, Tensor};

/// Fresh student parameters and the teacher as an exact copy.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> crate::error::Result<(Parameters, Parameters)> {
    let student = Parameters::init(cfg, seed)?;
    let teacher = student.clone();
    Ok((student, teacher))
}
