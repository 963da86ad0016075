//! Diagnostics over trained models and corpora: hallucinations under source
//! perturbation, rare-subword statistics, bucketed output quality and PWCCA
//! similarity of encoder representations.

mod activations;
mod buckets;
mod hallucination;
mod pwcca;
mod rarity;

pub use activations::{collect_activations, heatmap_csv, pwcca_heatmap, ActivationMatrix, Pooling};
pub use buckets::{bucketed_quality, BucketReport, FreqBucket, LenBucket};
pub use hallucination::{
    count_hallucinations, insertion_positions, HallucinationError, HallucinationRecord, HallucinationReport, ModelTranslator,
    PerturbationSpec, Translator,
};
pub use pwcca::{mean_cca, pwcca, PwccaError, PwccaResult, RANK_TOLERANCE};
pub use rarity::{rare_subword_stats, rarest_subword, RarityReport, SideSummary};
