//! Attribution engine for feed-forward neural networks.
//!
//! The crate loads a serialized sequential model, runs a recorded forward
//! pass, and explains individual predictions by propagating a per-layer
//! backward quantity from a selected output unit down to the input. The
//! method catalog covers plain gradients, Deconvnet and GuidedBackprop,
//! input-times-gradient, IntegratedGradients, SmoothGrad, PatternNet and
//! PatternAttribution, DeepTaylor, and the LRP z / epsilon / alpha-beta
//! rules. Pattern-based methods are fitted to data via streaming statistics,
//! and attributions can be scored quantitatively with perturbation curves.
//!
//! Typical flow:
//!
//! ```
//! use nnattr::model::builder::ModelBuilder;
//! use nnattr::analyzers::{analyze, MethodConfig, Method};
//! use nnattr::forward::NeuronSelector;
//! use nnattr::tensor::Tensor;
//!
//! let model = ModelBuilder::new(vec![2])
//!     .dense_from(vec![2, 1], vec![1.0, 2.0], None)
//!     .build()
//!     .unwrap();
//! let cfg = MethodConfig::new(Method::Gradient, NeuronSelector::Max);
//! let attribution = analyze(&model, &Tensor::from_vec(vec![1.0, 1.0]), &cfg, None).unwrap();
//! assert_eq!(attribution.values.data(), &[1.0, 2.0]);
//! ```

pub mod analyzers;
pub mod config;
mod conv;
pub mod evaluation;
pub mod fileio;
pub mod forward;
pub mod heatmap;
pub mod model;
pub mod patterns;
pub mod tensor;

pub use analyzers::{analyze, Attribution, Method, MethodConfig};
pub use forward::{forward, NeuronSelector, Tape};
pub use model::{load_model, save_model, validate_model, Model};
pub use tensor::Tensor;
