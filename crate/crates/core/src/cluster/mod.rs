//! Stage two: contrastive clustering of OOD data.

mod kmeans;
mod losses;
mod train;

pub use kmeans::{count_confident_clusters, estimate_k, kmeans, KMeansConfig, KMeansResult};
pub use losses::{
    cluster_level_loss, contrastive_from_similarities, entropy_regularizer,
    filter_false_negatives, instance_level_loss, kcc_loss, knn_hard_negatives,
    ClusterBatchState, ClusterLevelOutput, HardNegativeSet, InstanceOutput, KccConfig, KccOutput,
    SimilarityGrads,
};
pub use train::{
    assign, cluster_train, encode_features, encode_representations, predict, write_cluster_csv, ClusterConfig,
    ClusterEpoch, ClusterMode, ClusterOutcome,
};
