//! Datasets, pretraining, the gamma trade-off sweep, and the runtime
//! verification suite.

pub mod data;
pub mod idx;
pub mod sweep;
pub mod verify;

pub use data::{synthetic_tasks, LabeledDataset, Provenance};
pub use idx::load_idx;
pub use sweep::{pretrain, records_to_csv, sweep_gamma, SweepOptions, TradeoffRecord};
pub use verify::{verify, CheckResult, VerifyReport};
