//! Metrics, reports and pipeline orchestration.

mod metrics;
mod pipeline;
mod report;

pub use metrics::{class_accuracy, dominant_color, iou, mean_pairwise_iou, r_precision, ranks_within, NearestCentroid};
pub use pipeline::{
    ablation_configs, evaluate, imle_items, load_selector, new_selector, prior_source, retrieval_accuracy,
    run_ablation, selector_examples, train_fused_generator, train_latent, train_selector, Pipeline, Selector,
    TrainingLog, CACHE_ENV,
};
pub use report::{ItemMetrics, MetricReport};
