//! Vocabulary probes for visual token representations.

mod lens;
mod matching;

pub use lens::{
    cluster_reference_token, embedlens_topk, logit_lens_topk, Lens, LensKind, RankedToken,
    RankedTokens,
};
pub use matching::{
    matching_accuracy, normalize_token, sparsity_curve, sparsity_curve_layers, AccuracyReport,
    MatchRule, MatchScope, SparsityCurve, SparsityPoint,
};
