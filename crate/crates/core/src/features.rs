//! Feature vectors: loading, pooling, fusion and normalization.
//!
//! Two text formats are supported. Whole-image tables:
//!
//! ```text
//! #dim 3
//! img001 0.1 -0.2 0.3
//! ```
//!
//! and region tables, where every line carries a priority and several lines
//! may share one id (they form that image's region set, in file order):
//!
//! ```text
//! #dim 3
//! img001 0.92 0.1 -0.2 0.3
//! img001 0.40 0.0  0.5 0.1
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! a written table reloads bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Number of top-priority regions pooled by default.
pub const DEFAULT_TOP_K: usize = 5;

/// A single identified dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f64>,
}

/// Result of late fusion: the first source's values followed by the second's.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub values: Vec<f64>,
    pub split: usize,
}

impl FusedFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first(&self) -> &[f64] {
        &self.values[..self.split]
    }

    pub fn second(&self) -> &[f64] {
        &self.values[self.split..]
    }
}

/// Id-indexed vectors of one fixed dimension, stored contiguously in
/// insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("feature dim must be positive".into()));
        }
        Ok(FeatureTable {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&row| self.row(row))
    }

    /// Row position of `id` in insertion order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// All rows, row-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> + '_ {
        self.ids
            .iter()
            .enumerate()
            .map(move |(row, id)| (id.as_str(), self.row(row)))
    }

    pub fn insert(&mut self, id: impl Into<String>, values: &[f64]) -> Result<()> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature `{id}`")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::InvalidConfig(format!("duplicate id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn vector(&self, id: &str) -> Option<FeatureVector> {
        self.get(id).map(|values| FeatureVector {
            id: id.to_string(),
            values: values.to_vec(),
        })
    }
}

/// One region encoding with its predicted priority.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub priority: f64,
    pub values: Vec<f64>,
}

/// The ordered region encodings of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet {
    pub id: String,
    pub regions: Vec<Region>,
}

/// Region sets for many images, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    dim: usize,
    sets: Vec<RegionFeatureSet>,
    index: HashMap<String, usize>,
}

impl RegionTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("region dim must be positive".into()));
        }
        Ok(RegionTable {
            dim,
            sets: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RegionFeatureSet> {
        self.index.get(id).map(|&i| &self.sets[i])
    }

    pub fn sets(&self) -> &[RegionFeatureSet] {
        &self.sets
    }

    /// Appends a region to `id`'s set, creating the set on first use.
    pub fn push(&mut self, id: &str, priority: f64, values: &[f64]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        if !priority.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("region of `{id}`")));
        }
        let slot = match self.index.get(id) {
            Some(&i) => i,
            None => {
                self.index.insert(id.to_string(), self.sets.len());
                self.sets.push(RegionFeatureSet {
                    id: id.to_string(),
                    regions: Vec::new(),
                });
                self.sets.len() - 1
            }
        };
        self.sets[slot].regions.push(Region {
            priority,
            values: values.to_vec(),
        });
        Ok(())
    }

    /// Pools every image's top-`k` regions into a whole-image table.
    pub fn pool_topk(&self, k: usize) -> Result<FeatureTable> {
        let mut table = FeatureTable::new(self.dim)?;
        for set in &self.sets {
            let pooled = mean_pool_topk(set, k)?;
            table.insert(pooled.id, &pooled.values)?;
        }
        Ok(table)
    }
}

/// Mean of the `k` highest-priority region vectors (all of them if fewer).
///
/// Priority ties keep list order. The selected vectors are summed in their
/// original list order, so with `k >= regions.len()` the result is
/// bit-identical to [`mean_pool`] over the whole list.
pub fn mean_pool_topk(set: &RegionFeatureSet, k: usize) -> Result<FeatureVector> {
    if set.regions.is_empty() {
        return Err(Error::Empty(format!("region set of `{}`", set.id)));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("top-k must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..set.regions.len()).collect();
    // Stable sort: equal priorities stay in file order.
    order.sort_by(|&a, &b| set.regions[b].priority.total_cmp(&set.regions[a].priority));
    order.truncate(k);
    order.sort_unstable();
    let chosen: Vec<&[f64]> = order
        .iter()
        .map(|&i| set.regions[i].values.as_slice())
        .collect();
    Ok(FeatureVector {
        id: set.id.clone(),
        values: mean_of(&chosen)?,
    })
}

/// Arithmetic mean of equal-length vectors.
pub fn mean_pool<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let refs: Vec<&[f64]> = vectors.iter().map(AsRef::as_ref).collect();
    mean_of(&refs)
}

fn mean_of(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("mean pool over no vectors".into()))?;
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

/// Late fusion by concatenation.
pub fn concat_fuse(a: &[f64], b: &[f64]) -> Result<FusedFeature> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("zero-length vector in fusion".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fusion input".into()));
    }
    let mut values = Vec::with_capacity(a.len() + b.len());
    values.extend_from_slice(a);
    values.extend_from_slice(b);
    Ok(FusedFeature {
        values,
        split: a.len(),
    })
}

/// Fuses two tables row by row, in the order of `a`'s ids. Every id of `a`
/// must be present in `b`.
pub fn fuse_tables(a: &FeatureTable, b: &FeatureTable) -> Result<FeatureTable> {
    let mut out = FeatureTable::new(a.dim() + b.dim())?;
    for (id, va) in a.iter() {
        let vb = b.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        out.insert(id, &concat_fuse(va, vb)?.values)?;
    }
    Ok(out)
}

/// Scales `v` to unit euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector to normalize".into()));
    }
    // Pre-scaling by the largest magnitude keeps the squared sum in range.
    let peak = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / peak).collect();
    let norm = scaled.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(scaled.into_iter().map(|x| x / norm).collect())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_header(text: &str) -> Result<usize> {
    let first = text
        .lines()
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected `#dim D` header"))?;
    let dim = first
        .trim()
        .strip_prefix("#dim")
        .and_then(|rest| rest.trim().parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::parse(1, format!("malformed header `{}`", first.trim())))?;
    Ok(dim)
}

fn parse_values<'a>(fields: impl Iterator<Item = &'a str>, line: usize) -> Result<Vec<f64>> {
    fields
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid number `{tok}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(line, format!("non-finite value `{tok}`")))
            }
        })
        .collect()
}

/// Parses the whole-image feature format.
pub fn parse_feature_table(text: &str) -> Result<FeatureTable> {
    let dim = parse_header(text)?;
    let mut table = FeatureTable::new(dim)?;
    for (i, raw) in text.lines().enumerate().skip(1) {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let id = fields.next().expect("non-empty line has a field");
        let values = parse_values(fields, line)?;
        if values.len() != dim {
            return Err(Error::parse(
                line,
                format!(
                    "row length mismatch: expected {dim} values, found {}",
                    values.len()
                ),
            ));
        }
        if table.contains(id) {
            return Err(Error::parse(line, format!("duplicate id `{id}`")));
        }
        table.insert(id, &values)?;
    }
    Ok(table)
}

/// Parses the region feature format.
pub fn parse_region_table(text: &str) -> Result<RegionTable> {
    let dim = parse_header(text)?;
    let mut table = RegionTable::new(dim)?;
    for (i, raw) in text.lines().enumerate().skip(1) {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let id = fields.next().expect("non-empty line has a field");
        let mut values = parse_values(fields, line)?;
        if values.len() != dim + 1 {
            return Err(Error::parse(
                line,
                format!(
                    "row length mismatch: expected priority plus {dim} values, found {} fields",
                    values.len()
                ),
            ));
        }
        let priority = values.remove(0);
        table.push(id, priority, &values)?;
    }
    Ok(table)
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<FeatureTable> {
    parse_feature_table(&read_text(path.as_ref())?)
}

pub fn load_region_table(path: impl AsRef<Path>) -> Result<RegionTable> {
    parse_region_table(&read_text(path.as_ref())?)
}

fn write_row<W: Write>(out: &mut W, id: &str, lead: Option<f64>, values: &[f64]) -> io::Result<()> {
    write!(out, "{id}")?;
    if let Some(p) = lead {
        write!(out, " {p}")?;
    }
    for v in values {
        write!(out, " {v}")?;
    }
    writeln!(out)
}

pub fn write_feature_table<W: Write>(table: &FeatureTable, out: &mut W) -> io::Result<()> {
    writeln!(out, "#dim {}", table.dim())?;
    for (id, values) in table.iter() {
        write_row(out, id, None, values)?;
    }
    Ok(())
}

pub fn write_region_table<W: Write>(table: &RegionTable, out: &mut W) -> io::Result<()> {
    writeln!(out, "#dim {}", table.dim())?;
    for set in table.sets() {
        for region in &set.regions {
            write_row(out, &set.id, Some(region.priority), &region.values)?;
        }
    }
    Ok(())
}

pub fn save_feature_table(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_feature_table(table, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn save_region_table(table: &RegionTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_region_table(table, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}
