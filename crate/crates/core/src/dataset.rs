//! Graded-relevance retrieval datasets, training pairs, query folds and the
//! planted-similarity synthetic corpus.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{FeatureTable, RegionTable};

/// Relevance grade in `0..=3` (0 irrelevant, 3 excellent match).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Grade(u8);

impl Grade {
    pub const MAX: u8 = 3;

    pub fn new(value: u8) -> Result<Self> {
        if value <= Self::MAX {
            Ok(Grade(value))
        } else {
            Err(Error::GradeOutOfRange(value as i64))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Judgment {
    pub reference: String,
    pub grade: Grade,
}

/// Queries with their judged reference pools.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalDataset {
    queries: Vec<String>,
    judgments: HashMap<String, Vec<Judgment>>,
    seen: HashSet<(String, String)>,
}

impl RetrievalDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one judgment; queries keep first-seen order.
    pub fn add(&mut self, query: &str, reference: &str, grade: Grade) -> Result<()> {
        if query == reference {
            return Err(Error::InvalidConfig(format!(
                "query `{query}` judged against itself"
            )));
        }
        if !self.seen.insert((query.to_string(), reference.to_string())) {
            return Err(Error::InvalidConfig(format!(
                "duplicate judgment ({query}, {reference})"
            )));
        }
        let list = self.judgments.entry(query.to_string()).or_insert_with(|| {
            self.queries.push(query.to_string());
            Vec::new()
        });
        list.push(Judgment {
            reference: reference.to_string(),
            grade,
        });
        Ok(())
    }

    pub fn queries(&self) -> &[String] {
        &self.queries
    }

    /// Judged references of `query` in file order (empty for unknown queries).
    pub fn judgments(&self, query: &str) -> &[Judgment] {
        self.judgments.get(query).map_or(&[], Vec::as_slice)
    }

    pub fn contains_query(&self, query: &str) -> bool {
        self.judgments.contains_key(query)
    }

    pub fn grade(&self, query: &str, reference: &str) -> Option<Grade> {
        self.judgments(query)
            .iter()
            .find(|j| j.reference == reference)
            .map(|j| j.grade)
    }

    pub fn num_judgments(&self) -> usize {
        self.judgments.values().map(Vec::len).sum()
    }

    /// Every id mentioned, queries first, then references in judgment order.
    pub fn image_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        for q in &self.queries {
            if seen.insert(q.as_str()) {
                ids.push(q.as_str());
            }
        }
        for q in &self.queries {
            for j in self.judgments(q) {
                if seen.insert(j.reference.as_str()) {
                    ids.push(j.reference.as_str());
                }
            }
        }
        ids
    }
}

/// Parses `QUERY_ID REF_ID GRADE` lines.
pub fn parse_relevance(text: &str) -> Result<RetrievalDataset> {
    let mut ds = RetrievalDataset::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let [query, reference, grade] = fields[..] else {
            return Err(Error::parse(
                line,
                format!("expected `QUERY REF GRADE`, found {} fields", fields.len()),
            ));
        };
        let value: i64 = grade
            .parse()
            .map_err(|_| Error::parse(line, format!("invalid grade `{grade}`")))?;
        let grade = u8::try_from(value)
            .ok()
            .and_then(|g| Grade::new(g).ok())
            .ok_or_else(|| Error::parse(line, format!("grade {value} out of range 0..=3")))?;
        ds.add(query, reference, grade)
            .map_err(|e| Error::parse(line, e.to_string()))?;
    }
    if ds.queries.is_empty() {
        return Err(Error::parse(1, "no judgments in relevance file"));
    }
    Ok(ds)
}

pub fn load_relevance(path: impl AsRef<Path>) -> Result<RetrievalDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_relevance(&text)
}

pub fn write_relevance<W: Write>(ds: &RetrievalDataset, out: &mut W) -> io::Result<()> {
    for q in ds.queries() {
        for j in ds.judgments(q) {
            writeln!(out, "{q} {} {}", j.reference, j.grade)?;
        }
    }
    Ok(())
}

pub fn save_relevance(ds: &RetrievalDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_relevance(ds, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// A (query, reference) training pair with its grade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub id_a: String,
    pub id_b: String,
    pub y: Grade,
}

/// One pair per judgment of each training query, in query order then
/// reference file order. References are never paired with each other.
pub fn generate_pairs(ds: &RetrievalDataset, train_queries: &[String]) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for q in train_queries {
        if !ds.contains_query(q) {
            return Err(Error::UnknownId(q.clone()));
        }
        pairs.extend(ds.judgments(q).iter().map(|j| Pair {
            id_a: q.clone(),
            id_b: j.reference.clone(),
            y: j.grade,
        }));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_queries: Vec<String>,
    pub eval_queries: Vec<String>,
}

/// Seeded shuffle, then round-robin deal into `folds` evaluation sets.
///
/// Both lists of each split keep the input query order.
pub fn kfold_split(queries: &[String], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if queries.len() < folds {
        return Err(Error::InvalidConfig(format!(
            "{} queries cannot fill {folds} folds",
            queries.len()
        )));
    }
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; queries.len()];
    for (slot, &q) in order.iter().enumerate() {
        fold_of[q] = slot % folds;
    }
    Ok((0..folds)
        .map(|f| {
            let (eval, train): (Vec<_>, Vec<_>) = queries
                .iter()
                .enumerate()
                .partition(|(i, _)| fold_of[*i] == f);
            FoldSplit {
                fold_index: f,
                train_queries: train.into_iter().map(|(_, q)| q.clone()).collect(),
                eval_queries: eval.into_iter().map(|(_, q)| q.clone()).collect(),
            }
        })
        .collect())
}

/// Parameters of the planted-similarity corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_queries: usize,
    pub refs_per_query: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub n_latent_clusters: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Regions emitted per image.
    pub regions_per_image: usize,
    /// Leading high-priority regions that carry the image's own cluster;
    /// the rest are low-priority distractors drawn from other clusters.
    pub signal_regions: usize,
    /// Grade 2 for clusters adjacent on the cluster ring; when off, grades
    /// are 3 (same cluster) or 0.
    pub ring_grading: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_queries: 50,
            refs_per_query: 180,
            dim_a: 512,
            dim_b: 512,
            n_latent_clusters: 10,
            noise_sigma: 3.5,
            seed: 0,
            regions_per_image: 6,
            signal_regions: 5,
            ring_grading: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_queries", self.n_queries),
            ("refs_per_query", self.refs_per_query),
            ("dim_a", self.dim_a),
            ("dim_b", self.dim_b),
            ("n_latent_clusters", self.n_latent_clusters),
            ("regions_per_image", self.regions_per_image),
            ("signal_regions", self.signal_regions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.signal_regions > self.regions_per_image {
            return Err(Error::InvalidConfig(
                "signal_regions exceeds regions_per_image".into(),
            ));
        }
        if self.signal_regions < self.regions_per_image && self.n_latent_clusters < 2 {
            return Err(Error::InvalidConfig(
                "distractor regions need at least 2 clusters".into(),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Grade of a (query, reference) pair from their clusters.
    pub fn grade_for(&self, a: usize, b: usize) -> Grade {
        let c = self.n_latent_clusters;
        let adjacent = c > 2 && ((a + 1) % c == b || (b + 1) % c == a) || c == 2 && a != b;
        if a == b {
            Grade(3)
        } else if self.ring_grading && adjacent {
            Grade(2)
        } else {
            Grade(0)
        }
    }
}

/// Output of [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub view_a: FeatureTable,
    pub view_b: RegionTable,
    pub dataset: RetrievalDataset,
    /// Ground-truth cluster of every image.
    pub clusters: HashMap<String, usize>,
}

// Values are rounded to this many decimals so written files reload exactly.
const SYNTH_DECIMALS: f64 = 1e4;

fn quantize(x: f64) -> f64 {
    (x * SYNTH_DECIMALS).round() / SYNTH_DECIMALS
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn noisy(rng: &mut ChaCha8Rng, centroid: &[f64], sigma: f64) -> Vec<f64> {
    centroid
        .iter()
        .map(|c| quantize(c + sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Builds a two-view planted corpus.
///
/// Every image belongs to a latent cluster. View A is the cluster's
/// view-A centroid plus isotropic noise. View B is a region set: the
/// `signal_regions` high-priority regions scatter around an independent
/// view-B centroid of the same cluster, the remainder are low-priority
/// regions around other clusters' centroids. Region noise is scaled by
/// `sqrt(signal_regions)` so pooled view B has the same noise level as
/// view A. Query `i` sits in cluster `i mod C`; each query owns
/// `refs_per_query` fresh reference images with uniformly drawn clusters.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.n_latent_clusters;
    let centroids_a: Vec<Vec<f64>> = (0..c)
        .map(|_| gaussian_vec(&mut rng, cfg.dim_a, 1.0))
        .collect();
    let centroids_b: Vec<Vec<f64>> = (0..c)
        .map(|_| gaussian_vec(&mut rng, cfg.dim_b, 1.0))
        .collect();
    let region_sigma = cfg.noise_sigma * (cfg.signal_regions as f64).sqrt();

    let mut view_a = FeatureTable::new(cfg.dim_a)?;
    let mut view_b = RegionTable::new(cfg.dim_b)?;
    let mut dataset = RetrievalDataset::new();
    let mut clusters = HashMap::new();

    let width = digits(cfg.n_queries.max(cfg.refs_per_query));
    let mut emit = |id: &str, cluster: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        view_a.insert(id, &noisy(rng, &centroids_a[cluster], cfg.noise_sigma))?;
        let mut regions = Vec::with_capacity(cfg.regions_per_image);
        for r in 0..cfg.regions_per_image {
            if r < cfg.signal_regions {
                let p = quantize(rng.random_range(0.5..1.0));
                regions.push((p, noisy(rng, &centroids_b[cluster], region_sigma)));
            } else {
                let other = (cluster + rng.random_range(1..c)) % c;
                let p = quantize(rng.random_range(0.0..0.5));
                regions.push((p, noisy(rng, &centroids_b[other], region_sigma)));
            }
        }
        regions.shuffle(rng);
        for (p, v) in &regions {
            view_b.push(id, *p, v)?;
        }
        Ok(())
    };

    for qi in 0..cfg.n_queries {
        let qid = format!("q{qi:0width$}");
        let qc = qi % c;
        emit(&qid, qc, &mut rng)?;
        clusters.insert(qid.clone(), qc);
        for ri in 0..cfg.refs_per_query {
            let rid = format!("q{qi:0width$}_r{ri:0width$}");
            let rc = rng.random_range(0..c);
            emit(&rid, rc, &mut rng)?;
            dataset.add(&qid, &rid, cfg.grade_for(qc, rc))?;
            clusters.insert(rid, rc);
        }
    }
    Ok(SynthCorpus {
        view_a,
        view_b,
        dataset,
        clusters,
    })
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}
