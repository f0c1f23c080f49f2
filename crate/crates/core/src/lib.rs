//! Multi-hypothesis adversarial autoencoder for detecting faulty days in
//! particulate-matter sensor records.

pub mod data;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod tensor;
pub mod training;

pub use data::{Dataset, Label, NormStats, Sample};
pub use detection::{ThresholdModel, Verdict};
pub use error::{Error, Result};
pub use evaluation::{MetricReport, MonteCarloSummary, Profile, SurfacePoint};
pub use losses::{LossBreakdown, LossWeights};
pub use networks::{ModelConfig, Models};
pub use tensor::{Graph, ParamStore, Parameter, Tensor, Var};
pub use training::TrainRun;
