//! ROT-k ciphertext data augmentation for neural machine translation.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`cipher`]: ROT-k encipherment over configurable alphabets and codepoint blocks.
//! * [`subword`]: joint byte-pair-encoding learning and segmentation.
//! * [`corpus`]: parallel corpora, tagged multi-source datasets and anchored batches.
//! * [`model`]: a small encoder-decoder transformer with hand-written gradients.
//! * [`losses`]: label-smoothed NLL, the symmetric-KL agreement loss and the composite objective.
//! * [`trainer`]: Adam with an inverse square root schedule, early stopping and checkpoint averaging.
//! * [`eval`]: tokenized BLEU and paired bootstrap resampling.
//! * [`analysis`]: hallucination counting, rare-subword statistics, bucketed quality and PWCCA.
//! * [`pipeline`] and [`synthetic`]: end-to-end preparation helpers and a toy translation task.
//!
//! Data-parallel loops go through [`exec::Execution`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise. Both paths
//! produce bit-identical results.

pub mod analysis;
pub mod cipher;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod io;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod subword;
pub mod synthetic;
pub mod trainer;

pub use exec::Execution;
