//! Siamese metric learning over fused image features, with graded-relevance
//! retrieval evaluation.
//!
//! * [`features`]: vector file formats, top-k region pooling, late fusion.
//! * [`dataset`]: relevance judgments, training pairs, query folds and a
//!   planted-similarity synthetic corpus.
//! * [`model`]: the tied-weight MLP, contrastive losses, backprop, SGD and
//!   checkpoints.
//! * [`eval`]: distance ranking and nDCG@K reports.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
mod linalg;
pub mod model;

pub use dataset::{
    generate_pairs, kfold_split, load_relevance, synth_generate, FoldSplit, Grade, Pair,
    RetrievalDataset, SynthConfig, SynthCorpus,
};
pub use error::{Error, Result};
pub use eval::{
    dcg, evaluate, ndcg_at_k, rank_references, write_report, Embedder, EvalReport, Gain,
    RankedList, RawFeatures,
};
pub use features::{
    concat_fuse, l2_normalize, load_feature_table, load_region_table, mean_pool, mean_pool_topk,
    FeatureTable, FeatureVector, FusedFeature, RegionFeatureSet, RegionTable,
};
pub use model::{
    batch_grad, embedding_distance, loss_modified, loss_standard, sgd_step, train, Gradients,
    LossConfig, LossKind, PairInput, SiameseModel, TrainConfig, TrainHistory,
};
