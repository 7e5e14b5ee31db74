//! Meta-reweighting laboratory for noisy-label training.
//!
//! - [`net`]: fully-connected networks with zero-initialized output layers,
//!   exact per-example gradients and Jacobian-vector products.
//! - [`kernel`]: empirical tangent kernels, centering and sign-separation statistics.
//! - [`meta`]: the bilevel reweighting trainer and its hypergradient backends.
//! - [`fbr`]: feature-based reweighting, the hypergradient-free surrogate.
//! - [`data`]: synthetic clusters, label noise, clean subsets and the `.rlab` format.
//! - [`analysis`]: phase detection, Monte-Carlo scaling and linearization diagnostics.

// Dense matrix code indexes several parallel arrays per loop.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod data;
pub mod error;
pub mod fbr;
pub mod kernel;
pub mod meta;
pub mod net;
pub mod seed;
pub mod stats;
pub mod trace;

pub use data::{Dataset, ExampleSet, NoiseKind, NoiseSpec, SplitTag};
pub use error::{Error, Result};
pub use fbr::{FbrConfig, FbrRun, FeatureMap, Loss, RowShiftRecord};
pub use kernel::{Centering, GramMatrix, KernelStats};
pub use meta::{Backend, HypergradDiagnostics, MetaConfig, MetaRun, WeightVector};
pub use net::{Activation, JacobianBlock, NetConfig, NetParams};
pub use trace::{EpochRecord, RunTrace};
