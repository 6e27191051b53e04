//! Distance ranking and graded-relevance scoring (DCG / nDCG@K).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::dataset::RetrievalDataset;
use crate::error::{Error, Result};
use crate::features::{euclidean_distance, FeatureTable};
use crate::model::SiameseModel;

/// How a relevance grade turns into gain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Gain {
    /// `2^rel − 1`
    #[default]
    Exponential,
    /// `rel`
    Linear,
}

impl Gain {
    pub fn of(self, rel: u8) -> f64 {
        match self {
            Gain::Exponential => f64::from((1u32 << rel) - 1),
            Gain::Linear => f64::from(rel),
        }
    }
}

impl fmt::Display for Gain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gain::Exponential => "exp",
            Gain::Linear => "linear",
        })
    }
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Gain::Exponential),
            "linear" => Ok(Gain::Linear),
            other => Err(Error::InvalidConfig(format!("unknown gain `{other}`"))),
        }
    }
}

/// References of one query in ascending distance.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: String,
    pub references: Vec<String>,
    pub distances: Vec<f64>,
}

/// Sorts references by euclidean distance to `query_vec`; exact ties go to
/// the smaller id.
pub fn rank_references<S: AsRef<str>, V: AsRef<[f64]>>(
    query: &str,
    query_vec: &[f64],
    refs: &[(S, V)],
) -> Result<RankedList> {
    if refs.is_empty() {
        return Err(Error::Empty(format!("no references for query `{query}`")));
    }
    let mut scored = Vec::with_capacity(refs.len());
    for (id, v) in refs {
        let v = v.as_ref();
        if v.len() != query_vec.len() {
            return Err(Error::DimMismatch {
                expected: query_vec.len(),
                actual: v.len(),
            });
        }
        if v.iter().chain(query_vec).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ranking vector `{}`",
                id.as_ref()
            )));
        }
        scored.push((euclidean_distance(query_vec, v), id.as_ref()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let (distances, references) = scored
        .into_iter()
        .map(|(d, id)| (d, id.to_string()))
        .unzip();
    Ok(RankedList {
        query: query.to_string(),
        references,
        distances,
    })
}

/// `Σ_{i=1..min(k,n)} gain(rel_i) / log2(i + 1)`.
pub fn dcg(relevances: &[u8], k: usize, gain: Gain) -> f64 {
    relevances
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain.of(r) / ((i + 2) as f64).log2())
        .sum()
}

/// DCG normalized by the ideal ordering's DCG; `0.0` when every grade is 0.
pub fn ndcg_at_k(relevances: &[u8], k: usize, gain: Gain) -> f64 {
    let mut ideal = relevances.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let best = dcg(&ideal, k, gain);
    if best == 0.0 {
        return 0.0;
    }
    (dcg(relevances, k, gain) / best).min(1.0)
}

/// Maps inputs to the space in which retrieval distances are measured.
pub trait Embedder {
    /// Embeds `rows` inputs stored row-major.
    fn embed_rows(&self, x: &[f64], rows: usize) -> Result<Vec<f64>>;
}

impl Embedder for SiameseModel {
    fn embed_rows(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        SiameseModel::embed_rows(self, x, rows)
    }
}

/// Identity embedder: ranks by the raw input features.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawFeatures;

impl Embedder for RawFeatures {
    fn embed_rows(&self, x: &[f64], _rows: usize) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// nDCG at each K, keyed and ordered by query id.
    pub per_query: BTreeMap<String, Vec<f64>>,
    pub mean_ndcg: Vec<f64>,
    /// Queries whose judged grades are all 0.
    pub flagged: BTreeSet<String>,
    /// Free-form provenance (fold index, pair counts, ...).
    pub meta: BTreeMap<String, String>,
}

impl EvalReport {
    /// Per-K average of several reports' means, with per-query rows merged.
    pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Empty("no reports to aggregate".into()))?;
        if reports.iter().any(|r| r.ks != first.ks) {
            return Err(Error::InvalidConfig("reports use different K lists".into()));
        }
        let n = reports.len() as f64;
        let mean_ndcg = (0..first.ks.len())
            .map(|i| reports.iter().map(|r| r.mean_ndcg[i]).sum::<f64>() / n)
            .collect();
        let mut per_query = BTreeMap::new();
        let mut flagged = BTreeSet::new();
        for r in reports {
            per_query.extend(r.per_query.iter().map(|(k, v)| (k.clone(), v.clone())));
            flagged.extend(r.flagged.iter().cloned());
        }
        Ok(EvalReport {
            ks: first.ks.clone(),
            per_query,
            mean_ndcg,
            flagged,
            meta: BTreeMap::from([("folds".to_string(), reports.len().to_string())]),
        })
    }

    /// Mean nDCG at cutoff `k`, if it was evaluated.
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| self.mean_ndcg[i])
    }
}

/// Ranks each evaluation query's judged references in `embedder`'s space and
/// scores the ranking at every cutoff in `ks`.
pub fn evaluate<E: Embedder + ?Sized>(
    embedder: &E,
    features: &FeatureTable,
    ds: &RetrievalDataset,
    eval_queries: &[String],
    ks: &[usize],
    gain: Gain,
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("rank cutoffs must be positive".into()));
    }
    if eval_queries.is_empty() {
        return Err(Error::Empty("no evaluation queries".into()));
    }
    let dim = features.dim();
    let mut per_query = BTreeMap::new();
    let mut flagged = BTreeSet::new();
    for q in eval_queries {
        let judged = ds.judgments(q);
        if judged.is_empty() {
            return Err(Error::UnknownId(q.clone()));
        }
        let mut rows = Vec::with_capacity((judged.len() + 1) * dim);
        for id in std::iter::once(q.as_str()).chain(judged.iter().map(|j| j.reference.as_str())) {
            rows.extend_from_slice(
                features
                    .get(id)
                    .ok_or_else(|| Error::UnknownId(id.to_string()))?,
            );
        }
        let emb = embedder.embed_rows(&rows, judged.len() + 1)?;
        let width = emb.len() / (judged.len() + 1);
        let refs: Vec<(&str, &[f64])> = judged
            .iter()
            .enumerate()
            .map(|(i, j)| (j.reference.as_str(), &emb[(i + 1) * width..(i + 2) * width]))
            .collect();
        let ranked = rank_references(q, &emb[..width], &refs)?;
        let rels: Vec<u8> = ranked
            .references
            .iter()
            .map(|r| ds.grade(q, r).expect("ranked reference is judged").get())
            .collect();
        if rels.iter().all(|&r| r == 0) {
            flagged.insert(q.clone());
        }
        per_query.insert(
            q.clone(),
            ks.iter().map(|&k| ndcg_at_k(&rels, k, gain)).collect(),
        );
    }
    let n = per_query.len() as f64;
    let mean_ndcg = (0..ks.len())
        .map(|i| per_query.values().map(|v: &Vec<f64>| v[i]).sum::<f64>() / n)
        .collect();
    Ok(EvalReport {
        ks: ks.to_vec(),
        per_query,
        mean_ndcg,
        flagged,
        meta: BTreeMap::from([("eval_queries".to_string(), eval_queries.len().to_string())]),
    })
}

pub fn write_report_to<W: Write>(report: &EvalReport, out: &mut W) -> io::Result<()> {
    writeln!(out, "K,mean_ndcg")?;
    for (k, m) in report.ks.iter().zip(&report.mean_ndcg) {
        writeln!(out, "{k},{m:.6}")?;
    }
    writeln!(out)?;
    writeln!(out, "query_id,K,ndcg")?;
    for (q, values) in &report.per_query {
        for (k, v) in report.ks.iter().zip(values) {
            writeln!(out, "{q},{k},{v:.6}")?;
        }
    }
    for q in &report.flagged {
        writeln!(out, "#flagged: {q}")?;
    }
    for (k, v) in &report.meta {
        writeln!(out, "# {k}={v}")?;
    }
    Ok(())
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_report_to(report, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_relevance;
    use proptest::prelude::*;

    /// Brute force: DCG by direct summation and the ideal DCG as the
    /// maximum over every permutation.
    fn oracle_ndcg(rels: &[u8], k: usize, gain: Gain) -> f64 {
        fn direct(rels: &[u8], k: usize, gain: Gain) -> f64 {
            let mut s = 0.0;
            for (i, &r) in rels.iter().take(k).enumerate() {
                let g = match gain {
                    Gain::Exponential => 2f64.powi(r as i32) - 1.0,
                    Gain::Linear => r as f64,
                };
                s += g / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
            }
            s
        }
        fn permute(items: &mut Vec<u8>, n: usize, k: usize, gain: Gain, best: &mut f64) {
            if n <= 1 {
                *best = best.max(direct(items, k, gain));
                return;
            }
            for i in 0..n {
                permute(items, n - 1, k, gain, best);
                let j = if n.is_multiple_of(2) { i } else { 0 };
                items.swap(j, n - 1);
            }
        }
        let mut items = rels.to_vec();
        let mut best = 0.0;
        let n = items.len();
        permute(&mut items, n, k, gain, &mut best);
        if best == 0.0 {
            0.0
        } else {
            direct(rels, k, gain) / best
        }
    }

    #[test]
    fn dcg_examples() {
        assert_eq!(dcg(&[3], 1, Gain::Exponential), 7.0);
        assert_eq!(dcg(&[0, 0, 0], 3, Gain::Exponential), 0.0);
        assert_eq!(dcg(&[3, 0, 2], 3, Gain::Exponential), 8.5);
        assert_eq!(dcg(&[3, 0, 2], 3, Gain::Linear), 4.0);
    }

    #[test]
    fn ndcg_examples() {
        let v = ndcg_at_k(&[3, 0, 2], 3, Gain::Exponential);
        let expected = oracle_ndcg(&[3, 0, 2], 3, Gain::Exponential);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.955_83).abs() < 1e-5, "{v}");
        assert_eq!(ndcg_at_k(&[3, 2, 0], 3, Gain::Exponential), 1.0);
        assert_eq!(ndcg_at_k(&[0, 0, 0], 3, Gain::Exponential), 0.0);
    }

    #[test]
    fn only_ideal_equivalent_orders_reach_one() {
        let rels = [3u8, 0, 2, 2, 1];
        let mut items = rels.to_vec();
        let mut perms = Vec::new();
        fn heap(items: &mut Vec<u8>, n: usize, out: &mut Vec<Vec<u8>>) {
            if n <= 1 {
                out.push(items.clone());
                return;
            }
            for i in 0..n {
                heap(items, n - 1, out);
                let j = if n.is_multiple_of(2) { i } else { 0 };
                items.swap(j, n - 1);
            }
        }
        heap(&mut items, rels.len(), &mut perms);
        for p in perms {
            let sorted = p.windows(2).all(|w| w[0] >= w[1]);
            let v = ndcg_at_k(&p, p.len(), Gain::Exponential);
            assert_eq!(v == 1.0, sorted, "{p:?} -> {v}");
        }
    }

    #[test]
    fn ranking_examples() {
        let r = rank_references("q", &[0.0, 0.0], &[("a", [1.0, 0.0]), ("b", [3.0, 0.0])]).unwrap();
        assert_eq!(r.references, vec!["a", "b"]);
        assert_eq!(r.distances, vec![1.0, 3.0]);
        let tie = rank_references("q", &[0.0], &[("b", [1.0]), ("a", [-1.0])]).unwrap();
        assert_eq!(tie.references, vec!["a", "b"]);
        assert!(rank_references::<&str, Vec<f64>>("q", &[0.0], &[]).is_err());
        assert!(rank_references("q", &[0.0], &[("a", [1.0, 2.0])]).is_err());
    }

    #[test]
    fn evaluate_with_raw_features() {
        let ds = parse_relevance("q r1 3\nq r2 0\nq r3 2\nz r1 0").unwrap();
        let mut t = FeatureTable::new(1).unwrap();
        for (id, v) in [
            ("q", 0.0),
            ("r1", 0.1),
            ("r2", 5.0),
            ("r3", 0.2),
            ("z", 9.0),
        ] {
            t.insert(id, &[v]).unwrap();
        }
        let queries = vec!["q".to_string(), "z".to_string()];
        let report = evaluate(&RawFeatures, &t, &ds, &queries, &[1, 3], Gain::Exponential).unwrap();
        assert_eq!(report.per_query["q"], vec![1.0, 1.0]);
        assert_eq!(report.per_query["z"], vec![0.0, 0.0]);
        assert_eq!(report.mean_ndcg, vec![0.5, 0.5]);
        assert!(report.flagged.contains("z"));
        assert!(evaluate(&RawFeatures, &t, &ds, &queries, &[0], Gain::Exponential).is_err());
        let missing = vec!["nope".to_string()];
        assert!(evaluate(&RawFeatures, &t, &ds, &missing, &[1], Gain::Exponential).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let report = EvalReport {
            ks: vec![5, 10],
            per_query: BTreeMap::from([
                ("b".to_string(), vec![0.5, 0.25]),
                ("a".to_string(), vec![1.0, 0.75]),
            ]),
            mean_ndcg: vec![0.75, 0.5],
            flagged: BTreeSet::from(["c".to_string()]),
            meta: BTreeMap::new(),
        };
        let mut buf = Vec::new();
        write_report_to(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(&lines[..3], &["K,mean_ndcg", "5,0.750000", "10,0.500000"]);
        assert_eq!(lines[4], "query_id,K,ndcg");
        assert_eq!(lines[5], "a,5,1.000000");
        assert_eq!(lines[7], "b,5,0.500000");
        assert!(text.contains("#flagged: c"));
        let mut again = Vec::new();
        write_report_to(&report, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn aggregate_averages_fold_means() {
        let mk = |m: f64, q: &str| EvalReport {
            ks: vec![5],
            per_query: BTreeMap::from([(q.to_string(), vec![m])]),
            mean_ndcg: vec![m],
            flagged: BTreeSet::new(),
            meta: BTreeMap::new(),
        };
        let agg = EvalReport::aggregate(&[mk(0.2, "a"), mk(0.6, "b")]).unwrap();
        assert!((agg.mean_ndcg[0] - 0.4).abs() < 1e-15);
        assert_eq!(agg.per_query.len(), 2);
        assert_eq!(agg.mean_at(5), Some(agg.mean_ndcg[0]));
    }

    fn grades() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 1..8)
    }

    proptest! {
        #[test]
        fn ndcg_matches_permutation_oracle(rels in grades(), k in 1usize..9, linear in any::<bool>()) {
            let gain = if linear { Gain::Linear } else { Gain::Exponential };
            let v = ndcg_at_k(&rels, k, gain);
            prop_assert!((v - oracle_ndcg(&rels, k, gain)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&v));
            let mut ideal = rels.clone();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            if dcg(&ideal, k, gain) > 0.0 {
                prop_assert_eq!(ndcg_at_k(&ideal, k, gain), 1.0);
            }
        }

        #[test]
        fn equal_grades_permute_freely(rels in prop::collection::vec(0u8..4, 2..30), k in 1usize..30, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Shuffle positions holding the same grade among themselves.
            let mut shuffled = rels.clone();
            for g in 0..4u8 {
                let pos: Vec<usize> = (0..rels.len()).filter(|&i| rels[i] == g).collect();
                let mut vals: Vec<u8> = pos.iter().map(|&i| shuffled[i]).collect();
                vals.shuffle(&mut rng);
                for (p, v) in pos.iter().zip(vals) { shuffled[*p] = v; }
            }
            let a = ndcg_at_k(&rels, k, Gain::Exponential);
            let b = ndcg_at_k(&shuffled, k, Gain::Exponential);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn promoting_a_better_item_never_hurts(rels in prop::collection::vec(0u8..4, 2..20), i in 0usize..19, k in 1usize..20) {
            let i = i % (rels.len() - 1);
            prop_assume!(rels[i + 1] > rels[i]);
            let mut swapped = rels.clone();
            swapped.swap(i, i + 1);
            prop_assert!(ndcg_at_k(&swapped, k, Gain::Exponential) >= ndcg_at_k(&rels, k, Gain::Exponential));
        }

        #[test]
        fn ranking_matches_sort_oracle(
            refs in prop::collection::vec((0u32..1000, prop::collection::vec(-3i8..3, 2)), 1..60),
            q in prop::collection::vec(-3i8..3, 2),
        ) {
            // Small integer coordinates force plenty of exact distance ties.
            let refs: Vec<(String, Vec<f64>)> = refs.into_iter().enumerate()
                .map(|(i, (tag, v))| (format!("r{tag}_{i}"), v.into_iter().map(f64::from).collect()))
                .collect();
            let qv: Vec<f64> = q.into_iter().map(f64::from).collect();
            let ranked = rank_references("q", &qv, &refs).unwrap();
            // Oracle: insertion sort on squared distance, then id.
            let mut oracle: Vec<(f64, String)> = Vec::new();
            for (id, v) in &refs {
                let d2: f64 = v.iter().zip(&qv).map(|(a, b)| (a - b) * (a - b)).sum();
                let pos = oracle.iter().position(|(od, oid)| d2 < *od || (d2 == *od && id < oid)).unwrap_or(oracle.len());
                oracle.insert(pos, (d2, id.clone()));
            }
            let ids: Vec<String> = oracle.into_iter().map(|(_, id)| id).collect();
            prop_assert_eq!(&ranked.references, &ids);
            prop_assert!(ranked.distances.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn relabeling_ids_keeps_ndcg(
            coords in prop::collection::vec(-100.0..100.0f64, 2..15),
            grades in prop::collection::vec(0u8..4, 15),
        ) {
            let n = coords.len();
            let score = |prefix: &str| {
                let refs: Vec<(String, [f64; 1])> = (0..n).map(|i| (format!("{prefix}{:02}", n - i), [coords[i]])).collect();
                let ranked = rank_references("q", &[0.0], &refs).unwrap();
                let rels: Vec<u8> = ranked.references.iter().map(|id| {
                    let i = refs.iter().position(|(r, _)| r == id).unwrap();
                    grades[i]
                }).collect();
                ndcg_at_k(&rels, 10, Gain::Exponential)
            };
            let mut distinct = coords.iter().map(|c| c.abs().to_bits()).collect::<Vec<_>>();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assume!(distinct.len() == n);
            prop_assert_eq!(score("a"), score("zz"));
        }
    }
}
