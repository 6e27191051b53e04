//! Subcommand bodies. Data goes to files or standard output; progress and
//! diagnostics go to standard error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use siamfuse::dataset::save_relevance;
use siamfuse::features::{save_feature_table, save_region_table};
use siamfuse::model::gradcheck::{run_trials, GradCheckConfig};
use siamfuse::model::{load_checkpoint, save_checkpoint};
use siamfuse::{
    load_feature_table, load_region_table, load_relevance, rank_references, synth_generate,
    write_report, Embedder, EvalReport, FeatureTable, FoldSplit, LossConfig, RawFeatures,
    RegionTable, RetrievalDataset, TrainConfig, TrainHistory,
};

use crate::args::{DataArgs, EvalArgs, GradcheckArgs, RankArgs, SynthArgs, TrainArgs};
use crate::experiment::{self, build_inputs, check_coverage, ExperimentConfig, Views};

pub const FIC_FILE: &str = "fic.txt";
pub const REGIONS_FILE: &str = "regions.txt";
pub const RELEVANCE_FILE: &str = "relevance.txt";
pub const FOLDS_FILE: &str = "folds.csv";

pub fn model_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold}.model"))
}

pub fn history_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold}_history.csv"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    body(&mut out)
        .and_then(|_| out.flush())
        .with_context(|| format!("writing {}", path.display()))
}

struct Data {
    fic: FeatureTable,
    regions: RegionTable,
    ds: RetrievalDataset,
}

fn load_data(args: &DataArgs) -> Result<Data> {
    let fic =
        load_feature_table(&args.fic).with_context(|| format!("loading {}", args.fic.display()))?;
    let regions = load_region_table(&args.regions)
        .with_context(|| format!("loading {}", args.regions.display()))?;
    let ds =
        load_relevance(&args.rel).with_context(|| format!("loading {}", args.rel.display()))?;
    Ok(Data { fic, regions, ds })
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let corpus = synth_generate(&args.config())?;
    create_dir(&args.out)?;
    save_feature_table(&corpus.view_a, args.out.join(FIC_FILE))?;
    save_region_table(&corpus.view_b, args.out.join(REGIONS_FILE))?;
    save_relevance(&corpus.dataset, args.out.join(RELEVANCE_FILE))?;
    eprintln!(
        "wrote {} queries, {} images, {} judgments to {}",
        corpus.dataset.queries().len(),
        corpus.view_a.len(),
        corpus.dataset.num_judgments(),
        args.out.display()
    );
    Ok(())
}

pub fn experiment_config(args: &TrainArgs) -> ExperimentConfig {
    ExperimentConfig {
        folds: args.folds,
        seed: args.seed,
        layers: args.layers.clone(),
        loss: LossConfig {
            margin: args.margin,
            batch_size: args.batch,
            kind: args.loss,
            grade_scale: if args.scale_grades { 1.0 / 3.0 } else { 1.0 },
        },
        train: TrainConfig {
            epochs: args.epochs,
            learning_rate: args.lr,
            momentum: args.momentum,
            seed: args.seed,
            shuffle_each_epoch: true,
        },
    }
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    write_file(path, |out| {
        writeln!(out, "epoch,mean_loss")?;
        for (i, loss) in history.epoch_loss.iter().enumerate() {
            writeln!(out, "{},{loss:.17e}", i + 1)?;
        }
        Ok(())
    })
}

fn write_folds(path: &Path, splits: &[FoldSplit]) -> Result<()> {
    write_file(path, |out| {
        writeln!(out, "fold,role,query_id")?;
        for s in splits {
            for q in &s.train_queries {
                writeln!(out, "{},train,{q}", s.fold_index)?;
            }
            for q in &s.eval_queries {
                writeln!(out, "{},eval,{q}", s.fold_index)?;
            }
        }
        Ok(())
    })
}

/// Reads the fold assignment written by `train`.
pub fn read_folds(path: &Path) -> Result<Vec<FoldSplit>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "fold,role,query_id")) => {}
        _ => bail!("{}: missing `fold,role,query_id` header", path.display()),
    }
    let mut splits: Vec<FoldSplit> = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let [fold, role, query] = fields[..] else {
            bail!("{} line {}: expected 3 fields", path.display(), i + 1);
        };
        let fold: usize = fold
            .parse()
            .with_context(|| format!("{} line {}: bad fold index", path.display(), i + 1))?;
        ensure!(
            fold <= splits.len(),
            "{} line {}: folds out of order",
            path.display(),
            i + 1
        );
        if fold == splits.len() {
            splits.push(FoldSplit {
                fold_index: fold,
                train_queries: Vec::new(),
                eval_queries: Vec::new(),
            });
        }
        match role {
            "train" => splits[fold].train_queries.push(query.to_string()),
            "eval" => splits[fold].eval_queries.push(query.to_string()),
            other => bail!("{} line {}: unknown role `{other}`", path.display(), i + 1),
        }
    }
    ensure!(!splits.is_empty(), "{}: no folds", path.display());
    Ok(splits)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    ensure!(
        args.folds >= 2,
        "--folds must be at least 2 (got {})",
        args.folds
    );
    let cfg = experiment_config(args);
    cfg.loss.validate()?;
    cfg.train.validate()?;
    let data = load_data(&args.data)?;
    let inputs = build_inputs(&data.fic, &data.regions, args.k, args.views)?;
    check_coverage(&inputs, &data.ds)?;
    let splits = experiment::splits(&data.ds, &cfg)?;
    create_dir(&args.out)?;
    write_folds(&args.out.join(FOLDS_FILE), &splits)?;

    let mut out = io::stdout().lock();
    writeln!(out, "fold,train_pairs,first_loss,final_loss")?;
    for split in &splits {
        let f = split.fold_index;
        eprintln!("training fold {f} ({} queries)", split.train_queries.len());
        let run = experiment::train_fold(&inputs, &data.ds, split, &cfg)?;
        let meta = experiment::checkpoint_meta(
            args.views,
            data.fic.dim(),
            data.regions.dim(),
            args.k,
            &run,
            &cfg,
        );
        save_checkpoint(&run.model, &meta, model_path(&args.out, f))?;
        write_history(&history_path(&args.out, f), &run.history)?;
        let first = run
            .history
            .epoch_loss
            .first()
            .map_or("".into(), |l| format!("{l:.6}"));
        let last = run
            .history
            .epoch_loss
            .last()
            .map_or("".into(), |l| format!("{l:.6}"));
        writeln!(out, "{f},{},{first},{last}", run.train_pairs)?;
    }
    Ok(())
}

fn meta_value<'a>(meta: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .with_context(|| format!("{}: checkpoint lacks `{key}` metadata", path.display()))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let splits = read_folds(&args.models.join(FOLDS_FILE))?;
    let mut inputs: Option<(Views, usize, FeatureTable)> = None;
    let mut trained = Vec::with_capacity(splits.len());
    let mut baseline = Vec::new();
    create_dir(&args.out)?;

    for split in &splits {
        let f = split.fold_index;
        let path = model_path(&args.models, f);
        let ckpt = load_checkpoint(&path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let views: Views = meta_value(&ckpt.meta, "views", &path)?.parse()?;
        let k: usize = meta_value(&ckpt.meta, "top_k", &path)?
            .parse()
            .with_context(|| format!("{}: bad `top_k`", path.display()))?;
        if let Some(flag) = args.k {
            ensure!(
                flag == k,
                "--k {flag} differs from the k = {k} fold {f} was trained with"
            );
        }
        let pairs: Option<usize> = ckpt.meta.get("train_pairs").and_then(|p| p.parse().ok());
        let table = match &inputs {
            Some((v, kk, t)) if *v == views && *kk == k => t,
            _ => {
                let t = build_inputs(&data.fic, &data.regions, k, views)?;
                check_coverage(&t, &data.ds)?;
                &inputs.insert((views, k, t)).2
            }
        };
        ensure!(
            ckpt.model.input_dim() == table.dim(),
            "{}: model expects {}-dim inputs but the features give {}",
            path.display(),
            ckpt.model.input_dim(),
            table.dim()
        );
        let report = experiment::evaluate_fold(
            Some(&ckpt.model),
            table,
            &data.ds,
            split,
            &args.ks,
            args.gain,
            pairs,
        )?;
        write_report(&report, args.out.join(format!("fold_{f}_report.csv")))?;
        trained.push(report);
        if args.baseline {
            let report =
                experiment::evaluate_fold(None, table, &data.ds, split, &args.ks, args.gain, None)?;
            write_report(&report, args.out.join(format!("fold_{f}_baseline.csv")))?;
            baseline.push(report);
        }
    }

    let agg = experiment::aggregate(&trained)?;
    write_report(&agg, args.out.join("report.csv"))?;
    let base = if args.baseline {
        let b = experiment::aggregate(&baseline)?;
        write_report(&b, args.out.join("baseline.csv"))?;
        Some(b)
    } else {
        None
    };
    print_summary(&agg, base.as_ref())
}

fn print_summary(trained: &EvalReport, baseline: Option<&EvalReport>) -> Result<()> {
    let mut out = io::stdout().lock();
    match baseline {
        Some(b) => {
            writeln!(out, "K,trained,baseline")?;
            for (i, k) in trained.ks.iter().enumerate() {
                writeln!(out, "{k},{:.6},{:.6}", trained.mean_ndcg[i], b.mean_ndcg[i])?;
            }
        }
        None => {
            writeln!(out, "K,trained")?;
            for (i, k) in trained.ks.iter().enumerate() {
                writeln!(out, "{k},{:.6}", trained.mean_ndcg[i])?;
            }
        }
    }
    Ok(())
}

pub fn rank(args: &RankArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let judged = data.ds.judgments(&args.query);
    ensure!(!judged.is_empty(), "unknown query `{}`", args.query);

    let (embedder, views, k): (Box<dyn Embedder>, Views, usize) = match &args.model {
        Some(path) => {
            let ckpt = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let views = meta_value(&ckpt.meta, "views", path)?.parse()?;
            let k = meta_value(&ckpt.meta, "top_k", path)?
                .parse()
                .with_context(|| format!("{}: bad `top_k`", path.display()))?;
            (Box::new(ckpt.model), views, k)
        }
        None => (Box::new(RawFeatures), args.views, args.k),
    };
    let inputs = build_inputs(&data.fic, &data.regions, k, views)?;
    let ids: Vec<&str> = std::iter::once(args.query.as_str())
        .chain(judged.iter().map(|j| j.reference.as_str()))
        .collect();
    let mut rows = Vec::with_capacity(ids.len() * inputs.dim());
    for id in &ids {
        rows.extend_from_slice(
            inputs
                .get(id)
                .with_context(|| format!("id `{id}` has no features"))?,
        );
    }
    let emb = embedder.embed_rows(&rows, ids.len())?;
    let width = emb.len() / ids.len();
    let refs: Vec<(&str, &[f64])> = ids[1..]
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, &emb[(i + 1) * width..(i + 2) * width]))
        .collect();
    let ranked = rank_references(&args.query, &emb[..width], &refs)?;

    let body = |out: &mut dyn Write| -> io::Result<()> {
        writeln!(out, "rank,reference_id,distance,grade")?;
        for (i, (r, d)) in ranked.references.iter().zip(&ranked.distances).enumerate() {
            let grade = data
                .ds
                .grade(&args.query, r)
                .map_or(String::new(), |g| g.to_string());
            writeln!(out, "{},{r},{d:.17e},{grade}", i + 1)?;
        }
        Ok(())
    };
    match &args.out {
        Some(path) => write_file(path, |out| body(out)),
        None => Ok(body(&mut io::stdout().lock())?),
    }
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        epsilon: args.epsilon,
        corrupt: args.corrupt,
        ..GradCheckConfig::default()
    };
    ensure!(
        cfg.epsilon.is_finite() && cfg.epsilon > 0.0,
        "--epsilon must be positive"
    );
    let report = run_trials(args.trials, args.seed, &cfg)?;
    let passed = report.passed(&cfg);
    let summary = format!(
        "trials {}\nchecked {}\nskipped {}\nmax_rel_error {:.6e}\ntolerance {:e}\nresult {}\n",
        report.trials,
        report.checked,
        report.skipped,
        report.max_rel_error,
        cfg.tolerance,
        if passed { "pass" } else { "fail" }
    );
    print!("{summary}");
    if let Some(path) = &args.out {
        fs::write(path, &summary).with_context(|| format!("writing {}", path.display()))?;
    }
    if !passed {
        bail!(
            "gradient check failed: max relative error {:.3e} (tolerance {:e})",
            report.max_rel_error,
            cfg.tolerance
        );
    }
    Ok(())
}
