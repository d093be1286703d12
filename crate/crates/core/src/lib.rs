pub mod aggregation;
pub mod backbone;
pub mod container;
pub mod error;
pub mod numerics;
pub mod tasks;
pub mod training;
pub mod vim_module;
pub mod zoo;

pub use backbone::{Backbone, BackboneConfig, Branch, DeltaProvider, InsertionSite};
pub use error::{Error, Result};
pub use numerics::{Real, Tape, Tensor, Var};
pub use vim_module::{ModuleGeometry, ModuleKind, ModuleMeta, ViMModule};
pub use zoo::{ModuleZoo, ValidationReport};
