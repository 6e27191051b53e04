//! Tied-weight siamese multilayer perceptron.
//!
//! Both wings of the siamese pair run the same [`SiameseModel`]; there is
//! exactly one parameter set and one gradient accumulator. Hidden layers are
//! affine + rectifier, the last layer is affine only, and its output is
//! scaled to unit euclidean norm.

mod backprop;
mod checkpoint;
pub mod gradcheck;
mod loss;
mod optim;
mod train;

pub use backprop::{batch_grad, PairInput};
pub use checkpoint::{
    load_checkpoint, load_model, read_checkpoint, save_checkpoint, save_model, write_checkpoint,
    Checkpoint,
};
pub use loss::{loss_modified, loss_standard, LossConfig, LossKind};
pub use optim::{sgd_step, Velocity};
pub use train::{train, TrainConfig, TrainHistory};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Output units per layer used when none are given.
pub const DEFAULT_LAYER_DIMS: [usize; 5] = [1024, 2048, 1024, 512, 512];
pub const DEFAULT_INPUT_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    input_dim: usize,
    layer_dims: Vec<usize>,
    /// `weights[l]` is `layer_dims[l] × fan_in(l)`, row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Per-layer parameter-shaped buffers (gradients, velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &SiameseModel) -> Self {
        Gradients {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Flat view in parameter order: layer by layer, weights then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    fn same_shape(&self, model: &SiameseModel) -> bool {
        self.weights.len() == model.weights.len()
            && self.biases.len() == model.biases.len()
            && self
                .weights
                .iter()
                .zip(&model.weights)
                .all(|(a, b)| a.len() == b.len())
            && self
                .biases
                .iter()
                .zip(&model.biases)
                .all(|(a, b)| a.len() == b.len())
    }
}

/// Intermediate values of a batched forward pass.
pub(crate) struct ForwardCache {
    pub rows: usize,
    /// Input of every layer; `inputs[0]` is the batch itself, `inputs[l]`
    /// for `l > 0` is the rectified output of layer `l - 1`.
    pub inputs: Vec<Vec<f64>>,
    /// Unit-norm outputs, `rows × output_dim`.
    pub embeddings: Vec<f64>,
    /// Pre-normalization norm of each row.
    pub norms: Vec<f64>,
}

/// Splits `z` into its unit direction and norm; `None` for the zero vector.
pub(crate) fn unit_and_norm(z: &[f64]) -> Option<(Vec<f64>, f64)> {
    let peak = z.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return None;
    }
    let scaled = z
        .iter()
        .map(|x| (x / peak) * (x / peak))
        .sum::<f64>()
        .sqrt();
    let unit = z.iter().map(|x| (x / peak) / scaled).collect();
    Some((unit, peak * scaled))
}

impl SiameseModel {
    /// Zero-mean Gaussian weights with std `sqrt(2 / fan_in)`, zero biases.
    pub fn init(input_dim: usize, layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(input_dim, layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len());
        let mut fan_in = input_dim;
        for &out in layer_dims {
            let std = (2.0 / fan_in as f64).sqrt();
            weights.push(
                (0..out * fan_in)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            fan_in = out;
        }
        Ok(SiameseModel {
            input_dim,
            layer_dims: layer_dims.to_vec(),
            weights,
            biases: layer_dims.iter().map(|&d| vec![0.0; d]).collect(),
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        input_dim: usize,
        layer_dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(input_dim, &layer_dims)?;
        if weights.len() != layer_dims.len() || biases.len() != layer_dims.len() {
            return Err(Error::InvalidConfig(format!(
                "{} layers declared, {} weight and {} bias blocks given",
                layer_dims.len(),
                weights.len(),
                biases.len()
            )));
        }
        let mut fan_in = input_dim;
        for (l, &out) in layer_dims.iter().enumerate() {
            if weights[l].len() != out * fan_in || biases[l].len() != out {
                return Err(Error::InvalidConfig(format!(
                    "layer {l}: expected {out}×{fan_in} weights and {out} biases"
                )));
            }
            if weights[l].iter().chain(&biases[l]).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {l}")));
            }
            fan_in = out;
        }
        Ok(SiameseModel {
            input_dim,
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least one layer")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layer_dims[layer - 1]
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    /// Parameters in the same flat order as [`Gradients::iter`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Unit-norm embedding of one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, 1)?.embeddings)
    }

    /// Unit-norm embeddings of `rows` inputs stored row-major in `x`.
    pub fn embed_rows(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, rows)?.embeddings)
    }

    /// Pre-activations of every layer for one input, plus the embedding.
    pub fn trace(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.check_input(x, 1)?;
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut act = x.to_vec();
        for l in 0..self.num_layers() {
            let mut z = vec![0.0; self.layer_dims[l]];
            linalg::matmul_nt(
                &act,
                &self.weights[l],
                &mut z,
                1,
                self.fan_in(l),
                self.layer_dims[l],
            );
            z.iter_mut().zip(&self.biases[l]).for_each(|(z, b)| *z += b);
            act = if l + 1 < self.num_layers() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let (unit, _) = unit_and_norm(&act).ok_or(Error::DegenerateEmbedding)?;
        Ok((pre, unit))
    }

    fn check_input(&self, x: &[f64], rows: usize) -> Result<()> {
        if x.len() != rows * self.input_dim {
            return Err(Error::DimMismatch {
                expected: rows * self.input_dim,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: &[f64], rows: usize) -> Result<ForwardCache> {
        self.check_input(x, rows)?;
        let layers = self.num_layers();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers);
        inputs.push(x.to_vec());
        let mut out = Vec::new();
        for l in 0..layers {
            let width = self.layer_dims[l];
            let mut z = vec![0.0; rows * width];
            linalg::matmul_nt(
                &inputs[l],
                &self.weights[l],
                &mut z,
                rows,
                self.fan_in(l),
                width,
            );
            for row in z.chunks_exact_mut(width) {
                row.iter_mut()
                    .zip(&self.biases[l])
                    .for_each(|(z, b)| *z += b);
            }
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                inputs.push(z);
            } else {
                out = z;
            }
        }
        let width = self.output_dim();
        let mut embeddings = Vec::with_capacity(out.len());
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_exact(width) {
            let (unit, norm) = unit_and_norm(row).ok_or(Error::DegenerateEmbedding)?;
            embeddings.extend(unit);
            norms.push(norm);
        }
        Ok(ForwardCache {
            rows,
            inputs,
            embeddings,
            norms,
        })
    }
}

fn check_dims(input_dim: usize, layer_dims: &[usize]) -> Result<()> {
    if input_dim == 0 {
        return Err(Error::InvalidConfig("input_dim must be positive".into()));
    }
    if layer_dims.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one layer is required".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidConfig("layer widths must be positive".into()));
    }
    Ok(())
}

/// Plain euclidean distance between two embeddings.
pub fn embedding_distance(e1: &[f64], e2: &[f64]) -> f64 {
    crate::features::euclidean_distance(e1, e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_architecture_shapes() {
        let m = SiameseModel::init(DEFAULT_INPUT_DIM, &DEFAULT_LAYER_DIMS, 1).unwrap();
        let shapes: Vec<(usize, usize)> = (0..m.num_layers())
            .map(|l| (m.layer_dims()[l], m.weights(l).len() / m.layer_dims()[l]))
            .collect();
        assert_eq!(
            shapes,
            vec![
                (1024, 1024),
                (2048, 1024),
                (1024, 2048),
                (512, 1024),
                (512, 512)
            ]
        );
        assert!(m.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = SiameseModel::init(5, &[4, 3], 42).unwrap();
        assert_eq!(a, SiameseModel::init(5, &[4, 3], 42).unwrap());
        assert_ne!(a, SiameseModel::init(5, &[4, 3], 43).unwrap());
        let tiny = SiameseModel::init(2, &[3], 0).unwrap();
        assert_eq!(tiny.weights(0).len(), 6);
        assert_eq!(tiny.biases(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn init_std_matches_fan_in() {
        let m = SiameseModel::init(200, &[300], 9).unwrap();
        let w = m.weights(0);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.005, "{mean}");
        assert!((var - 0.01).abs() < 0.0005, "{var}");
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(SiameseModel::init(0, &[3], 0).is_err());
        assert!(SiameseModel::init(3, &[], 0).is_err());
        assert!(SiameseModel::init(3, &[2, 0], 0).is_err());
    }

    #[test]
    fn identity_layer_normalizes() {
        let m = SiameseModel::from_parts(
            2,
            vec![2],
            vec![vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0]],
        )
        .unwrap();
        assert_eq!(m.forward(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert!(matches!(
            m.forward(&[0.0, 0.0]),
            Err(Error::DegenerateEmbedding)
        ));
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn distance_examples() {
        let e = [0.6, 0.8];
        assert_eq!(embedding_distance(&e, &e), 0.0);
        assert_eq!(embedding_distance(&e, &[-0.6, -0.8]), 2.0);
        assert_eq!(embedding_distance(&[1.0, 0.0], &[0.0, 1.0]), 2f64.sqrt());
    }

    #[test]
    fn batched_forward_matches_single() {
        let mut m = SiameseModel::init(6, &[8, 5, 4], 3).unwrap();
        for l in 0..2 {
            m.biases_mut(l).iter_mut().for_each(|b| *b = 0.2);
        }
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).cos()).collect();
        let batch = m.embed_rows(&x, 3).unwrap();
        for r in 0..3 {
            let single = m.forward(&x[r * 6..(r + 1) * 6]).unwrap();
            for (a, b) in single.iter().zip(&batch[r * 4..(r + 1) * 4]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn forward_output_is_unit_and_pure(seed in any::<u64>(), x in prop::collection::vec(-5.0..5.0f64, 7)) {
            let m = SiameseModel::init(7, &[6, 4], seed).unwrap();
            if let Ok(e) = m.forward(&x) {
                let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-12);
                prop_assert_eq!(e, m.forward(&x).unwrap());
            }
        }

        #[test]
        fn pair_distance_is_symmetric(seed in any::<u64>(),
            a in prop::collection::vec(-3.0..3.0f64, 5),
            b in prop::collection::vec(-3.0..3.0f64, 5)) {
            let m = SiameseModel::init(5, &[6, 3], seed).unwrap();
            if let (Ok(ea), Ok(eb)) = (m.forward(&a), m.forward(&b)) {
                prop_assert_eq!(embedding_distance(&ea, &eb), embedding_distance(&eb, &ea));
                let d = embedding_distance(&ea, &eb);
                prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
            }
        }

        #[test]
        fn final_layer_scale_is_absorbed(seed in any::<u64>(), alpha in 0.01..100.0f64,
            x in prop::collection::vec(-2.0..2.0f64, 4)) {
            let m = SiameseModel::init(4, &[5, 3], seed).unwrap();
            let mut scaled = m.clone();
            scaled.weights_mut(1).iter_mut().for_each(|w| *w *= alpha);
            scaled.biases_mut(1).iter_mut().for_each(|b| *b *= alpha);
            if let Ok(e) = m.forward(&x) {
                let s = scaled.forward(&x).unwrap();
                for (p, q) in e.iter().zip(&s) {
                    prop_assert!((p - q).abs() <= 1e-9);
                }
            }
        }
    }
}
