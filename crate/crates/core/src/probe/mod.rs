//! Frozen-upstream evaluation: feature extraction, classifier heads,
//! cross-validation splits and metrics.

pub mod features;
pub mod heads;
pub mod metrics;
pub mod report;
pub mod split;
pub mod train;

pub use features::{extract_frozen_features, extract_with_params, FeatureDump, LayerAgg, UtteranceFeatures};
pub use metrics::{compute_metrics, MetricsReport};
pub use report::{evaluate_report, ReportTable};
pub use split::{make_split, Fold, SplitPlan, SplitScheme};
pub use train::{train_fold, train_probe, FoldResult, HeadKind, LabelMap, ProbeConfig};
