use crate::error::{Error, Result};

use super::{Gradients, SiameseModel, TrainConfig};

/// Momentum buffer, shaped like the model's parameters.
pub type Velocity = Gradients;

/// Classical momentum: `v ← momentum·v − lr·g`, then `θ ← θ + v`.
pub fn sgd_step(
    model: &mut SiameseModel,
    grads: &Gradients,
    cfg: &TrainConfig,
    velocity: &mut Velocity,
) -> Result<()> {
    if !grads.same_shape(model) || !velocity.same_shape(model) {
        return Err(Error::InvalidConfig(
            "gradient or velocity shape does not match the model".into(),
        ));
    }
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    for ((theta, g), v) in model
        .params_mut()
        .zip(grads.iter())
        .zip(velocity.iter_mut())
    {
        *v = mu * *v - lr * g;
        *theta += *v;
    }
    Ok(())
}
