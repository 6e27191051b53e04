use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Pair;
use crate::error::{Error, Result};
use crate::features::FeatureTable;

use super::backprop::indexed_grad;
use super::{sgd_step, Gradients, LossConfig, LossKind, SiameseModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean per-pair loss of each epoch, weighted by batch size.
    pub epoch_loss: Vec<f64>,
}

/// Mini-batch SGD over `pairs`, looking up each id's input row in `inputs`.
///
/// With the standard loss, grades are binarized (any positive grade counts
/// as similar). The last batch of an epoch may be smaller than the
/// configured size; its loss is normalized by its own pair count.
pub fn train(
    mut model: SiameseModel,
    pairs: &[Pair],
    inputs: &FeatureTable,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(SiameseModel, TrainHistory)> {
    loss.validate()?;
    cfg.validate()?;
    if inputs.dim() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            actual: inputs.dim(),
        });
    }
    let resolved: Vec<(usize, usize, u8)> = pairs
        .iter()
        .map(|p| {
            let row = |id: &str| {
                inputs
                    .position(id)
                    .ok_or_else(|| Error::UnknownId(id.to_string()))
            };
            let y = match loss.kind {
                LossKind::Standard => u8::from(p.y.get() > 0),
                LossKind::Modified => p.y.get(),
            };
            Ok((row(&p.id_a)?, row(&p.id_b)?, y))
        })
        .collect::<Result<_>>()?;

    let mut history = TrainHistory::default();
    if cfg.epochs == 0 || resolved.is_empty() {
        return Ok((model, history));
    }

    let dim = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    let mut grads = Gradients::zeros_like(&model);
    let mut velocity = Gradients::zeros_like(&model);
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut batch_rows: Vec<f64> = Vec::new();
    let mut batch_pairs: Vec<(usize, usize, u8)> = Vec::new();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(loss.batch_size).enumerate() {
            local.clear();
            batch_rows.clear();
            batch_pairs.clear();
            for &p in chunk {
                let (a, c, y) = resolved[p];
                let mut slot = |row: usize| {
                    *local.entry(row).or_insert_with(|| {
                        batch_rows.extend_from_slice(inputs.row(row));
                        batch_rows.len() / dim - 1
                    })
                };
                let (ia, ic) = (slot(a), slot(c));
                batch_pairs.push((ia, ic, y));
            }
            let e = indexed_grad(
                &model,
                &batch_rows,
                batch_rows.len() / dim,
                &batch_pairs,
                loss,
                &mut grads,
            )?;
            if !e.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_total += e * chunk.len() as f64;
            sgd_step(&mut model, &grads, cfg, &mut velocity)?;
        }
        history.epoch_loss.push(epoch_total / resolved.len() as f64);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Grade;

    fn toy() -> (FeatureTable, Vec<Pair>) {
        let mut t = FeatureTable::new(3).unwrap();
        t.insert("q", &[1.0, 0.2, 0.0]).unwrap();
        t.insert("near", &[0.9, 0.1, 0.3]).unwrap();
        t.insert("far", &[0.8, 0.3, 0.1]).unwrap();
        let pair = |b: &str, y| Pair {
            id_a: "q".into(),
            id_b: b.into(),
            y: Grade::new(y).unwrap(),
        };
        (t, vec![pair("near", 3), pair("far", 0)])
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (t, pairs) = toy();
        let m = SiameseModel::init(3, &[4, 2], 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, hist) = train(m.clone(), &pairs, &t, &LossConfig::default(), &cfg).unwrap();
        assert_eq!(out, m);
        assert!(hist.epoch_loss.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (t, pairs) = toy();
        let m = SiameseModel::init(3, &[8, 4], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let loss = LossConfig {
            batch_size: 1,
            ..LossConfig::default()
        };
        let (a, ha) = train(m.clone(), &pairs, &t, &loss, &cfg).unwrap();
        let (b, hb) = train(m, &pairs, &t, &loss, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.epoch_loss.last().unwrap() < &ha.epoch_loss[0]);
        assert!(ha.epoch_loss.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn unknown_id_is_reported() {
        let (t, mut pairs) = toy();
        pairs[1].id_b = "ghost".into();
        let m = SiameseModel::init(3, &[2], 0).unwrap();
        let err = train(
            m,
            &pairs,
            &t,
            &LossConfig::default(),
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownId(id) if id == "ghost"));
    }

    #[test]
    fn exploding_learning_rate_aborts() {
        let (t, pairs) = toy();
        let m = SiameseModel::init(3, &[4, 2], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e300,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let err = train(m, &pairs, &t, &LossConfig::default(), &cfg).unwrap_err();
        assert!(
            matches!(
                err,
                Error::NonFiniteLoss { .. } | Error::DegenerateEmbedding | Error::NonFinite(_)
            ),
            "{err:?}"
        );
    }
}
