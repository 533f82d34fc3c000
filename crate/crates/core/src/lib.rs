//! Device-independent randomness certification from CHSH Bell-test trials.
//!
//! The crate covers each stage of a protocol instance:
//!
//! - [`bell`]: trial records, conditional distributions and the
//!   non-signaling and Tsirelson-bounded polytopes with their vertices;
//! - [`calibration`]: maximum-likelihood fits of the device behavior;
//! - [`pef`]: optimal probability estimation factors, the power search and
//!   trial-budget planning;
//! - [`protocol`]: parameter planning and sequential accumulation with early
//!   stopping;
//! - [`extractor`]: a bit-exact Trevisan-style strong extractor;
//! - [`simulator`]: seeded trial streams and trial files;
//! - [`eat`]: the entropy-accumulation trial count used as a baseline;
//! - [`pipeline`]: end-to-end orchestration and certificates.
//!
//! [`reference`] holds the published calibration, analysis and PEF tables.

pub mod bell;
pub mod calibration;
pub mod eat;
pub mod extractor;
pub mod pef;
pub mod pipeline;
pub mod protocol;
pub mod reference;
pub mod simulator;
pub mod solver;

pub use bell::{ConditionalDistribution, InputDistribution, TrialRecord};
pub use calibration::CountTable;
pub use eat::{EatInputs, EatResult};
pub use extractor::{BitString, ExtractorParams, WeakDesign};
pub use pef::PefTable;
pub use pipeline::{Certificate, PipelineConfig, PipelineError};
pub use protocol::{ProtocolParams, RunCertificate};
pub use simulator::SimConfig;
