//! Structural compositional function networks for tabular data.
//!
//! Every feature gets a masked node that summarizes the *other* features into a
//! context value; a small committee of basis heads then predicts from the raw
//! features plus those contexts. The node projections double as a readable
//! dependency matrix, and each node can be rendered as a closed-form law.
//!
//! ```
//! use structcfn::{datakit, structnet::{ModelConfig, Task}, training};
//!
//! let data = datakit::synth_generate(&datakit::SynthSpec::basic(200, 1)).unwrap();
//! let all: Vec<usize> = (0..data.n_rows()).collect();
//! let data = datakit::standardize(&data, &all).unwrap();
//! let mut config = ModelConfig::new(5, Task::Regression);
//! config.epochs = 3;
//! let mut model = training::init_model(&config).unwrap();
//! let report = training::train(&mut model, &data, &config).unwrap();
//! assert_eq!(report.epoch_losses.len(), 3);
//! let schema = structcfn::interpret::dependency_matrix(&model);
//! assert_eq!(schema.m[0][0], 0.0);
//! ```

pub mod baseline;
pub mod basis;
pub mod cli;
pub mod datakit;
pub mod document;
pub mod error;
pub mod experiments;
pub mod gradengine;
pub mod interpret;
pub mod structnet;
pub mod training;

pub use error::{Error, Result};
