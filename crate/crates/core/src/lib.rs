//! Birkhoff integration of and against Banach-valued measures on finite atom
//! spaces, conditional expectations and martingale tests built on it, and a
//! Monte Carlo bench for change of measure with vector-valued measures.

pub mod banach;
pub mod bins;
pub mod birkhoff;
pub mod conditioning;
pub mod error;
pub mod experiments;
pub mod girsanov;
pub mod ito;
pub mod measure;
pub mod report;
pub mod rng;

pub use banach::{BanachValue, DualFunctional, Probe, SpaceDescriptor, TimeGrid};
pub use bins::BinEdges;
pub use birkhoff::{bi1_integrate, bi2_integrate, BirkhoffResult};
pub use error::{Error, Result};
pub use measure::{DiscreteMeasureSpace, Partition, TaggedPartition, VectorMeasure};
