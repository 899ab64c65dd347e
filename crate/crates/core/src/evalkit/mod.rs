//! Frozen-encoder evaluation: linear probes, k-means clustering,
//! out-of-distribution transfer, saliency, 2-D projections and reports.

mod cluster;
mod probe;
mod projection;
mod report;
mod saliency;

pub use cluster::{kmeans_eval, match_clusters, ClusterResult, KMEANS_RESTARTS, MAX_MATCH_K};
pub use probe::{
    embed_images, embed_samples, evaluate_probe, linear_probe, ood_eval, train_probe, Embeddings, OodResult, ProbeConfig,
    ProbeHead, ProbeResult,
};
pub use projection::{project_2d, silhouette_score, Projection2D};
pub use report::{
    lower_is_better, metric_names, read_results_csv, report_markdown, summarize, write_results_csv, Cell, ResultRow,
    SummaryTable,
};
pub use saliency::{guided_gradcam, nucleus_focus_score, upsample_bilinear, CamModel, EncoderWithHead, SaliencyMap};
