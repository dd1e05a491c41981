pub mod backbone;
pub mod layers;
pub mod registry;

pub use backbone::{Backbone, BackboneOutput, ForwardTrace, ParamGrads};
pub use registry::{arch_spec, build_backbone, ArchSpec, ARCHS};
