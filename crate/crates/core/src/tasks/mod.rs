//! Downstream tasks on fused representations and their metrics.

pub mod classify;
pub mod kmeans;
pub mod labels;
pub mod metrics;

pub use classify::{
    ce_loss, classifier_loss_on_tape, mce_loss, train_classifier, ClassificationRun,
    ClassifierHead, ClassifierLoss, ClassifyConfig, HeadVars, LossKind, ObjectiveInputs,
};
pub use kmeans::{kmeans, ClusteringResult, KMeansConfig};
pub use labels::{make_symmetric_noise, stratified_split, NoisyLabelSet};
pub use metrics::{classification_metrics, clustering_acc, nmi, ClassificationReport};
