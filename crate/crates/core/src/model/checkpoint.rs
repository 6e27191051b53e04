//! Text checkpoints.
//!
//! ```text
//! SIAMESE v1
//! input_dim 4
//! layers 2 3 2
//! # views=both
//! W 0 3 4
//! <3 lines of 4 values>
//! b 0 3
//! <1 line of 3 values>
//! ...
//! ```
//!
//! `# key=value` lines after the `layers` line carry free-form metadata.
//! Values are written with 17 significant digits and reload bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::SiameseModel;

const MAGIC: &str = "SIAMESE v1";

/// A model plus the metadata stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SiameseModel,
    pub meta: BTreeMap<String, String>,
}

pub fn write_checkpoint<W: Write>(
    model: &SiameseModel,
    meta: &BTreeMap<String, String>,
    out: &mut W,
) -> io::Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "input_dim {}", model.input_dim())?;
    write!(out, "layers {}", model.num_layers())?;
    for d in model.layer_dims() {
        write!(out, " {d}")?;
    }
    writeln!(out)?;
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    for l in 0..model.num_layers() {
        let (rows, cols) = (model.layer_dims()[l], model.fan_in(l));
        writeln!(out, "W {l} {rows} {cols}")?;
        for row in model.weights(l).chunks_exact(cols) {
            write_values(out, row)?;
        }
        writeln!(out, "b {l} {rows}")?;
        write_values(out, model.biases(l))?;
    }
    Ok(())
}

fn write_values<W: Write>(out: &mut W, values: &[f64]) -> io::Result<()> {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.write_all(b" ")?;
        }
        write!(out, "{v:.16e}")?;
    }
    writeln!(out)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: expected {what}")))
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("line {line}: invalid {what}")))
}

fn parse_row(text: &str, line: usize, expected: usize, layer: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("line {line}: invalid value `{t}`")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "layer {layer}, line {line}: expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, magic) = lines.next_line("header")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "unsupported header `{magic}`, expected `{MAGIC}`"
        )));
    }
    let (n, line) = lines.next_line("input_dim")?;
    let mut f = line.split_whitespace();
    if f.next() != Some("input_dim") {
        return Err(Error::Checkpoint(format!("line {n}: expected input_dim")));
    }
    let input_dim: usize = parse_num(f.next(), n, "input_dim")?;

    let (n, line) = lines.next_line("layers")?;
    let mut f = line.split_whitespace();
    if f.next() != Some("layers") {
        return Err(Error::Checkpoint(format!("line {n}: expected layers")));
    }
    let count: usize = parse_num(f.next(), n, "layer count")?;
    let dims: Vec<usize> = f
        .map(|t| parse_num(Some(t), n, "layer width"))
        .collect::<Result<_>>()?;
    if dims.len() != count || count == 0 {
        return Err(Error::Checkpoint(format!(
            "line {n}: declared {count} layers, listed {}",
            dims.len()
        )));
    }

    let mut meta = BTreeMap::new();
    let mut weights = Vec::with_capacity(count);
    let mut biases = Vec::with_capacity(count);
    let mut fan_in = input_dim;
    for (l, &rows) in dims.iter().enumerate() {
        let (mut n, mut line) = lines.next_line(&format!("W header of layer {l}"))?;
        while let Some(kv) = line.strip_prefix('#') {
            if l == 0 {
                if let Some((k, v)) = kv.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
            (n, line) = lines.next_line(&format!("W header of layer {l}"))?;
        }
        let mut f = line.split_whitespace();
        if f.next() != Some("W") || parse_num::<usize>(f.next(), n, "layer index")? != l {
            return Err(Error::Checkpoint(format!("line {n}: expected `W {l} ...`")));
        }
        let (r, c): (usize, usize) = (
            parse_num(f.next(), n, "rows")?,
            parse_num(f.next(), n, "cols")?,
        );
        if (r, c) != (rows, fan_in) {
            return Err(Error::Checkpoint(format!(
                "layer {l}: declared {r}×{c} weights, architecture needs {rows}×{fan_in}"
            )));
        }
        let mut w = Vec::with_capacity(rows * fan_in);
        for _ in 0..rows {
            let (n, line) = lines.next_line(&format!("weights of layer {l}"))?;
            w.extend(parse_row(line, n, fan_in, l)?);
        }
        let (n, line) = lines.next_line(&format!("b header of layer {l}"))?;
        let mut f = line.split_whitespace();
        if f.next() != Some("b") || parse_num::<usize>(f.next(), n, "layer index")? != l {
            return Err(Error::Checkpoint(format!("line {n}: expected `b {l} ...`")));
        }
        let r: usize = parse_num(f.next(), n, "rows")?;
        if r != rows {
            return Err(Error::Checkpoint(format!(
                "layer {l}: declared {r} biases, architecture needs {rows}"
            )));
        }
        let (n, line) = lines.next_line(&format!("biases of layer {l}"))?;
        biases.push(parse_row(line, n, rows, l)?);
        weights.push(w);
        fan_in = rows;
    }
    if let Some((i, extra)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Checkpoint(format!(
            "line {}: unexpected trailing content `{}`",
            i + 1,
            extra.trim()
        )));
    }
    let model = SiameseModel::from_parts(input_dim, dims, weights, biases)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(
    model: &SiameseModel,
    meta: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(model, meta, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)
}

pub fn save_model(model: &SiameseModel, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(model, &BTreeMap::new(), path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SiameseModel> {
    Ok(load_checkpoint(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(model: &SiameseModel, meta: &BTreeMap<String, String>) -> String {
        let mut buf = Vec::new();
        write_checkpoint(model, meta, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = SiameseModel::init(4, &[3, 2], 17).unwrap();
        m.biases_mut(0).copy_from_slice(&[0.1, -1e-300, 12345.678]);
        let meta = BTreeMap::from([("views".to_string(), "both".to_string())]);
        let back = read_checkpoint(&text(&m, &meta)).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.meta, meta);
        let x = [0.3, -0.1, 0.7, 0.2];
        assert_eq!(back.model.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let m = SiameseModel::init(3, &[2], 1).unwrap();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let m = SiameseModel::init(4, &[3, 2], 17).unwrap();
        let full = text(&m, &BTreeMap::new());
        let lines: Vec<&str> = full.lines().collect();
        for cut in 0..lines.len() {
            let partial = lines[..cut].join("\n");
            assert!(read_checkpoint(&partial).is_err(), "cut at {cut} accepted");
        }
    }

    #[test]
    fn size_mismatch_names_the_layer() {
        let m = SiameseModel::init(4, &[3, 2], 17).unwrap();
        let bad = text(&m, &BTreeMap::new()).replace("W 1 2 3", "W 1 2 4");
        let err = read_checkpoint(&bad).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");

        let short_row = {
            let t = text(&m, &BTreeMap::new());
            let mut lines: Vec<String> = t.lines().map(String::from).collect();
            let idx = lines.iter().position(|l| l.starts_with("W 1")).unwrap() + 1;
            let mut fields: Vec<&str> = lines[idx].split(' ').collect();
            fields.pop();
            lines[idx] = fields.join(" ");
            lines.join("\n")
        };
        let err = read_checkpoint(&short_row).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let m = SiameseModel::init(2, &[2], 0).unwrap();
        let bad = text(&m, &BTreeMap::new()).replace("SIAMESE v1", "SIAMESE v2");
        assert!(matches!(read_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }
}
