//! Central finite-difference verification of [`batch_grad`].
//!
//! The numerical side never touches the backward pass: it evaluates the
//! loss from forward embeddings and the loss functions alone. Parameters
//! whose `±ε` stencil crosses a non-differentiable point (a rectifier or a
//! hinge switching state) are skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

use super::{batch_grad, embedding_distance, LossConfig, LossKind, PairInput, SiameseModel};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Perturb the analytic gradient before comparing; exists to prove the
    /// checker catches a broken backward pass.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.checked > 0 && self.max_rel_error < cfg.tolerance
    }
}

/// Loss from forward passes only, together with the on/off state of every
/// rectifier and hinge.
fn loss_and_pattern(
    model: &SiameseModel,
    batch: &[PairInput<'_>],
    loss: &LossConfig,
) -> Result<(f64, Vec<bool>)> {
    let mut pattern = Vec::new();
    let mut dy = Vec::with_capacity(batch.len());
    for p in batch {
        let (pre_a, ea) = model.trace(p.a)?;
        let (pre_b, eb) = model.trace(p.b)?;
        let hidden = pre_a.len() - 1;
        for z in pre_a[..hidden].iter().chain(&pre_b[..hidden]).flatten() {
            pattern.push(*z > 0.0);
        }
        let d = embedding_distance(&ea, &eb);
        pattern.push(loss.hinge_active(d, p.y));
        dy.push((d, p.y));
    }
    Ok((loss.loss(&dy)?, pattern))
}

/// Largest relative deviation between analytic and numerical gradients
/// for one model and batch. Returns `(max_error, checked, skipped)`.
pub fn check_batch(
    model: &SiameseModel,
    batch: &[PairInput<'_>],
    loss: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<(f64, usize, usize)> {
    let (_, mut analytic) = batch_grad(model, batch, loss)?;
    if cfg.corrupt {
        if let Some(g) = analytic.iter_mut().next() {
            *g = *g * 1.5 + 1e-2;
        }
    }
    let analytic: Vec<f64> = analytic.iter().copied().collect();
    let mut probe = model.clone();
    let (mut worst, mut checked, mut skipped) = (0.0_f64, 0, 0);
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.params_mut().nth(i).expect("index within parameters");
        *probe.params_mut().nth(i).unwrap() = original + cfg.epsilon;
        let (plus, pat_plus) = loss_and_pattern(&probe, batch, loss)?;
        *probe.params_mut().nth(i).unwrap() = original - cfg.epsilon;
        let (minus, pat_minus) = loss_and_pattern(&probe, batch, loss)?;
        *probe.params_mut().nth(i).unwrap() = original;
        if pat_plus != pat_minus {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        worst = worst.max((a - numeric).abs() / denom);
        checked += 1;
    }
    Ok((worst, checked, skipped))
}

type OwnedBatch = Vec<(Vec<f64>, Vec<f64>, u8)>;

/// Random small instance: at most 64 parameters and 8 pairs.
fn random_instance(rng: &mut ChaCha8Rng) -> Result<(SiameseModel, OwnedBatch, LossKind)> {
    let (input_dim, dims) = loop {
        let input_dim = rng.random_range(2..=5);
        let depth = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=4)).collect();
        let mut fan_in = input_dim;
        let params: usize = dims
            .iter()
            .map(|&d| {
                let p = d * (fan_in + 1);
                fan_in = d;
                p
            })
            .sum();
        if params <= 64 {
            break (input_dim, dims);
        }
    };
    let mut model = SiameseModel::init(input_dim, &dims, rng.random())?;
    // Non-zero biases keep tiny rectifier nets from going silent and give
    // the bias gradients something to check.
    for l in 0..model.num_layers() {
        for b in model.biases_mut(l) {
            *b = rng.random_range(-0.2..0.5);
        }
    }
    let kind = if rng.random_bool(0.5) {
        LossKind::Modified
    } else {
        LossKind::Standard
    };
    let top = if kind == LossKind::Modified { 3 } else { 1 };
    let pairs = rng.random_range(1..=8);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..input_dim).map(|_| rng.sample(StandardNormal)).collect()
    };
    let batch = (0..pairs)
        .map(|_| (vec(rng), vec(rng), rng.random_range(0..=top)))
        .collect();
    Ok((model, batch, kind))
}

/// Runs `trials` seeded random instances.
pub fn run_trials(trials: usize, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        trials,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    let mut done = 0;
    while done < trials {
        let (model, batch, kind) = random_instance(&mut rng)?;
        let pairs: Vec<PairInput> = batch
            .iter()
            .map(|(a, b, y)| PairInput { a, b, y: *y })
            .collect();
        let loss = LossConfig {
            kind,
            ..LossConfig::default()
        };
        // A dead network (all-zero output) has no gradient to check; draw again.
        let (err, checked, skipped) = match check_batch(&model, &pairs, &loss, cfg) {
            Ok(r) => r,
            Err(crate::Error::DegenerateEmbedding) => continue,
            Err(e) => return Err(e),
        };
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += checked;
        report.skipped += skipped;
        done += 1;
    }
    Ok(report)
}
