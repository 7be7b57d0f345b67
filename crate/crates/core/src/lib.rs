//! Target-signature estimation from bag-labelled hyperspectral data, plus fast
//! estimates of how much relabelling a pixel or region would move the estimate.
//!
//! The numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the bottom of this file pin the common `f64` instantiations.

pub mod bags;
pub mod cube;
pub mod efumi;
pub mod endmembers;
pub mod error;
pub mod experiments;
pub mod influence;
pub mod io;
pub mod linalg;
pub mod proportions;
pub mod rng;
pub mod scalar;
pub mod superpixel;
pub mod synth;
pub mod unmix;

pub use bags::{Bag, BagSet, Label};
pub use cube::{HsiCube, Violation};
pub use efumi::{EfumiConfig, EfumiResult, ResolvedParams, WarmStart};
pub use endmembers::EndmemberSet;
pub use error::{Error, Result};
pub use influence::{DoIReport, InfluenceRecord, RankBy, Strategy, Unit};
pub use io::LabelMask;
pub use proportions::ProportionMatrix;
pub use rng::Rng;
pub use scalar::Scalar;
pub use superpixel::{RegionMetrics, SuperpixelMap};
pub use synth::{SyntheticConfig, SyntheticTruth};

pub type Cube = HsiCube<f64>;
pub type Cube32 = HsiCube<f32>;
pub type Endmembers = EndmemberSet<f64>;
pub type Endmembers32 = EndmemberSet<f32>;
pub type Proportions = ProportionMatrix<f64>;
pub type Proportions32 = ProportionMatrix<f32>;
pub type Efumi = EfumiResult<f64>;
pub type Efumi32 = EfumiResult<f32>;
pub type Truth = SyntheticTruth<f64>;
