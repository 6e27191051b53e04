use crate::error::{Error, Result};
use crate::linalg;

use super::{ForwardCache, Gradients, LossConfig, SiameseModel};

/// One siamese training example: both wing inputs and the relevance grade.
#[derive(Debug, Clone, Copy)]
pub struct PairInput<'a> {
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub y: u8,
}

/// Loss of `batch` and its exact gradient with respect to every parameter.
///
/// Both wings run the shared parameters, so each parameter's gradient sums
/// the contributions of both sides of every pair.
pub fn batch_grad(
    model: &SiameseModel,
    batch: &[PairInput<'_>],
    cfg: &LossConfig,
) -> Result<(f64, Gradients)> {
    let dim = model.input_dim();
    let mut rows = Vec::with_capacity(2 * batch.len() * dim);
    let mut pairs = Vec::with_capacity(batch.len());
    for (i, p) in batch.iter().enumerate() {
        for side in [p.a, p.b] {
            if side.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: side.len(),
                });
            }
            rows.extend_from_slice(side);
        }
        pairs.push((2 * i, 2 * i + 1, p.y));
    }
    let mut grads = Gradients::zeros_like(model);
    let loss = indexed_grad(model, &rows, 2 * batch.len(), &pairs, cfg, &mut grads)?;
    Ok((loss, grads))
}

/// Gradient over pairs that index rows of a shared input matrix.
///
/// Rows referenced by several pairs are embedded once; their upstream
/// gradients accumulate before the backward pass. `grads` is overwritten.
pub(crate) fn indexed_grad(
    model: &SiameseModel,
    inputs: &[f64],
    rows: usize,
    pairs: &[(usize, usize, u8)],
    cfg: &LossConfig,
    grads: &mut Gradients,
) -> Result<f64> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("gradient over an empty batch".into()));
    }
    let cache = model.forward_cached(inputs, rows)?;
    let width = model.output_dim();
    let scale = 1.0 / (2.0 * pairs.len() as f64);

    // dE/d(embedding) per row.
    let mut d_emb = vec![0.0; rows * width];
    let mut total = 0.0;
    for &(i, j, y) in pairs {
        let ei = &cache.embeddings[i * width..(i + 1) * width];
        let ej = &cache.embeddings[j * width..(j + 1) * width];
        let d = super::embedding_distance(ei, ej);
        let term = cfg.term(d, y)?;
        total += term.value;
        // The distance has no gradient at d = 0; take it as zero there.
        if d > 0.0 && term.slope != 0.0 {
            let g = scale * term.slope / d;
            for k in 0..width {
                let diff = g * (ei[k] - ej[k]);
                d_emb[i * width + k] += diff;
                d_emb[j * width + k] -= diff;
            }
        }
    }

    backward(model, &cache, d_emb, grads);
    Ok(total * scale)
}

fn backward(model: &SiameseModel, cache: &ForwardCache, d_emb: Vec<f64>, grads: &mut Gradients) {
    let rows = cache.rows;
    let width = model.output_dim();

    // Through the normalization e = z/|z|: dz = (de − e·(e·de)) / |z|.
    let mut dz = d_emb;
    for r in 0..rows {
        let e = &cache.embeddings[r * width..(r + 1) * width];
        let g = &mut dz[r * width..(r + 1) * width];
        let dot: f64 = e.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let inv = 1.0 / cache.norms[r];
        for (gk, ek) in g.iter_mut().zip(e) {
            *gk = (*gk - ek * dot) * inv;
        }
    }

    for l in (0..model.num_layers()).rev() {
        let out = model.layer_dims()[l];
        let fan_in = model.fan_in(l);
        let input = &cache.inputs[l];
        linalg::matmul_tn(&dz, input, &mut grads.weights[l], out, rows, fan_in);
        let db = &mut grads.biases[l];
        db.iter_mut().for_each(|b| *b = 0.0);
        for row in dz.chunks_exact(out) {
            db.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        if l > 0 {
            let mut da = vec![0.0; rows * fan_in];
            linalg::matmul_nn(&dz, model.weights(l), &mut da, rows, out, fan_in);
            // Rectifier: gradient flows only where the unit was positive.
            da.iter_mut().zip(input.iter()).for_each(|(g, a)| {
                if *a <= 0.0 {
                    *g = 0.0
                }
            });
            dz = da;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn flat_region_has_zero_gradient() {
        // Two antipodal embeddings: d = 2, so d² > margin for every pair.
        let m = SiameseModel::from_parts(
            2,
            vec![2],
            vec![vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0; 2]],
        )
        .unwrap();
        let a = [1.0, 0.5];
        let b = [-1.0, -0.5];
        let batch = [
            PairInput { a: &a, b: &b, y: 0 },
            PairInput { a: &b, b: &a, y: 0 },
        ];
        let (e, g) = batch_grad(&m, &batch, &LossConfig::default()).unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_have_zero_similar_gradient() {
        let m = SiameseModel::init(3, &[4, 2], 8).unwrap();
        let x = [0.3, -0.2, 0.9];
        let (e, g) = batch_grad(
            &m,
            &[PairInput { a: &x, b: &x, y: 3 }],
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_wings_gives_same_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = SiameseModel::init(5, &[6, 3], 2).unwrap();
        m.biases_mut(0).iter_mut().for_each(|b| *b = 0.3);
        let xs = random_inputs(&mut rng, 8, 5);
        for kind in [LossKind::Modified, LossKind::Standard] {
            let cfg = LossConfig {
                kind,
                ..LossConfig::default()
            };
            let top = if kind == LossKind::Standard { 2 } else { 4 };
            let ys: Vec<u8> = (0..4).map(|_| rng.random_range(0..top)).collect();
            let fwd: Vec<PairInput> = (0..4)
                .map(|i| PairInput {
                    a: &xs[2 * i],
                    b: &xs[2 * i + 1],
                    y: ys[i],
                })
                .collect();
            let rev: Vec<PairInput> = (0..4)
                .map(|i| PairInput {
                    a: &xs[2 * i + 1],
                    b: &xs[2 * i],
                    y: ys[i],
                })
                .collect();
            let (e1, g1) = batch_grad(&m, &fwd, &cfg).unwrap();
            let (e2, g2) = batch_grad(&m, &rev, &cfg).unwrap();
            assert_eq!(e1, e2);
            for (a, b) in g1.iter().zip(g2.iter()) {
                assert!((a - b).abs() <= 1e-13 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shared_rows_match_duplicated_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = SiameseModel::init(4, &[5, 3], 1).unwrap();
        m.biases_mut(0).iter_mut().for_each(|b| *b = 0.3);
        let xs = random_inputs(&mut rng, 4, 4);
        let flat: Vec<f64> = xs.concat();
        let pairs = [(0, 1, 3u8), (0, 2, 0), (0, 3, 2)];
        let cfg = LossConfig::default();
        let mut shared = Gradients::zeros_like(&m);
        let e1 = indexed_grad(&m, &flat, 4, &pairs, &cfg, &mut shared).unwrap();
        let batch: Vec<PairInput> = pairs
            .iter()
            .map(|&(i, j, y)| PairInput {
                a: &xs[i],
                b: &xs[j],
                y,
            })
            .collect();
        let (e2, dup) = batch_grad(&m, &batch, &cfg).unwrap();
        assert!((e1 - e2).abs() < 1e-15);
        for (a, b) in shared.iter().zip(dup.iter()) {
            assert!((a - b).abs() <= 1e-13 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn rejects_wrong_input_dim() {
        let m = SiameseModel::init(3, &[2], 0).unwrap();
        let a = [1.0, 2.0];
        let b = [1.0, 2.0, 3.0];
        assert!(matches!(
            batch_grad(
                &m,
                &[PairInput { a: &a, b: &b, y: 1 }],
                &LossConfig::default()
            ),
            Err(Error::DimMismatch { .. })
        ));
    }
}
