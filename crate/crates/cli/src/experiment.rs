//! Fold-level orchestration shared by the `train`, `eval` and `rank`
//! subcommands.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use siamfuse::features::fuse_tables;
use siamfuse::{
    evaluate, generate_pairs, kfold_split, train, EvalReport, FeatureTable, FoldSplit, Gain,
    LossConfig, RawFeatures, RegionTable, RetrievalDataset, SiameseModel, TrainConfig,
    TrainHistory,
};

/// Which feature views feed the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Views {
    /// Whole-image features followed by pooled region features.
    #[default]
    Both,
    /// Whole-image features only.
    Fic,
    /// Pooled region features only.
    Regions,
}

impl fmt::Display for Views {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Views::Both => "both",
            Views::Fic => "fic",
            Views::Regions => "regions",
        })
    }
}

impl FromStr for Views {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "both" => Views::Both,
            "fic" => Views::Fic,
            "regions" => Views::Regions,
            other => bail!("unknown views `{other}` (expected both, fic or regions)"),
        })
    }
}

/// Network inputs per image id: pooled top-`k` regions, fused after the
/// whole-image features when both views are used.
pub fn build_inputs(
    fic: &FeatureTable,
    regions: &RegionTable,
    k: usize,
    views: Views,
) -> Result<FeatureTable> {
    let pooled = regions.pool_topk(k).context("pooling region features")?;
    for id in pooled.ids() {
        ensure!(
            fic.contains(id),
            "id `{id}` has region features but no whole-image features"
        );
    }
    for id in fic.ids() {
        ensure!(
            pooled.contains(id),
            "id `{id}` has whole-image features but no region features"
        );
    }
    Ok(match views {
        Views::Both => fuse_tables(fic, &pooled)?,
        Views::Fic => fic.clone(),
        Views::Regions => pooled,
    })
}

/// Fails on the first dataset id with no input vector.
pub fn check_coverage(inputs: &FeatureTable, ds: &RetrievalDataset) -> Result<()> {
    for id in ds.image_ids() {
        ensure!(
            inputs.contains(id),
            "id `{id}` from the relevance file has no features"
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub seed: u64,
    pub layers: Vec<usize>,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Seeds for fold `f`: model initialization and pair shuffling.
    fn fold_seeds(&self, fold: usize) -> (u64, u64) {
        let base = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(fold as u64);
        (base, base ^ 0x5851_F42D_4C95_7F2D)
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub split: FoldSplit,
    pub model: SiameseModel,
    pub history: TrainHistory,
    pub train_pairs: usize,
}

pub fn splits(ds: &RetrievalDataset, cfg: &ExperimentConfig) -> Result<Vec<FoldSplit>> {
    Ok(kfold_split(ds.queries(), cfg.folds, cfg.seed)?)
}

/// Initializes and trains one fold's model on its training queries' pairs.
pub fn train_fold(
    inputs: &FeatureTable,
    ds: &RetrievalDataset,
    split: &FoldSplit,
    cfg: &ExperimentConfig,
) -> Result<FoldRun> {
    let (init_seed, shuffle_seed) = cfg.fold_seeds(split.fold_index);
    let pairs = generate_pairs(ds, &split.train_queries)?;
    let model = SiameseModel::init(inputs.dim(), &cfg.layers, init_seed)?;
    let train_cfg = TrainConfig {
        seed: shuffle_seed,
        ..cfg.train.clone()
    };
    let (model, history) = train(model, &pairs, inputs, &cfg.loss, &train_cfg)
        .with_context(|| format!("training fold {}", split.fold_index))?;
    Ok(FoldRun {
        split: split.clone(),
        model,
        history,
        train_pairs: pairs.len(),
    })
}

/// Trains every fold in order.
pub fn train_all(
    inputs: &FeatureTable,
    ds: &RetrievalDataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<FoldRun>> {
    check_coverage(inputs, ds)?;
    splits(ds, cfg)?
        .iter()
        .map(|s| train_fold(inputs, ds, s, cfg))
        .collect()
}

/// Scores a trained model and the raw-input baseline on one fold's
/// evaluation queries.
pub fn evaluate_fold(
    model: Option<&SiameseModel>,
    inputs: &FeatureTable,
    ds: &RetrievalDataset,
    split: &FoldSplit,
    ks: &[usize],
    gain: Gain,
    train_pairs: Option<usize>,
) -> Result<EvalReport> {
    let mut report = match model {
        Some(m) => evaluate(m, inputs, ds, &split.eval_queries, ks, gain)?,
        None => evaluate(&RawFeatures, inputs, ds, &split.eval_queries, ks, gain)?,
    };
    report
        .meta
        .insert("fold".into(), split.fold_index.to_string());
    report.meta.insert(
        "train_queries".into(),
        split.train_queries.len().to_string(),
    );
    if let Some(p) = train_pairs {
        report.meta.insert("train_pairs".into(), p.to_string());
    }
    Ok(report)
}

/// Aggregate over folds, listing every fold's pair count in the metadata.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let mut agg = EvalReport::aggregate(reports)?;
    let pairs: Vec<&str> = reports
        .iter()
        .filter_map(|r| r.meta.get("train_pairs").map(String::as_str))
        .collect();
    if !pairs.is_empty() {
        agg.meta.insert("train_pairs".into(), pairs.join(";"));
    }
    Ok(agg)
}

/// Checkpoint metadata describing how inputs were built.
pub fn checkpoint_meta(
    views: Views,
    fic_dim: usize,
    region_dim: usize,
    k: usize,
    run: &FoldRun,
    cfg: &ExperimentConfig,
) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("views".into(), views.to_string()),
        ("fic_dim".into(), fic_dim.to_string()),
        ("region_dim".into(), region_dim.to_string()),
        ("top_k".into(), k.to_string()),
        ("fold".into(), run.split.fold_index.to_string()),
        ("loss".into(), cfg.loss.kind.to_string()),
        ("train_pairs".into(), run.train_pairs.to_string()),
    ])
}
