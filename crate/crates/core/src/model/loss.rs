//! Pairwise contrastive losses over embedding distances.
//!
//! Both losses average over the `N` pairs of a mini-batch with a `1/(2N)`
//! factor:
//!
//! * standard, binary `y`:  `y·d + (1−y)·max(margin − d, 0)`
//! * modified, graded `y`:  `y²·d + [y = 0]·max(margin − d², 0)`
//!
//! `d` is the plain (unsquared) euclidean distance. The modified form keeps
//! the linear similar term and the squared distance inside the hinge exactly
//! as written above.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Binary relevance contrastive loss.
    Standard,
    /// Graded relevance loss with the squared grade weight.
    Modified,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Standard => "standard",
            LossKind::Modified => "modified",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(LossKind::Standard),
            "modified" => Ok(LossKind::Modified),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Hinge margin for dissimilar pairs.
    pub margin: f64,
    /// Pairs per mini-batch during training.
    pub batch_size: usize,
    pub kind: LossKind,
    /// Multiplier applied to grades before squaring in the modified loss
    /// (`1.0` feeds grades unscaled, `1/3` maps them onto `[0, 1]`).
    pub grade_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            batch_size: 64,
            kind: LossKind::Modified,
            grade_scale: 1.0,
        }
    }
}

/// One pair's loss term and its derivative with respect to `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Term {
    pub value: f64,
    pub slope: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::InvalidConfig("margin must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.grade_scale.is_finite() && self.grade_scale > 0.0) {
            return Err(Error::InvalidConfig("grade scale must be positive".into()));
        }
        Ok(())
    }

    /// Per-pair term before the `1/(2N)` factor. Hinges contribute value and
    /// slope only when strictly active; at the boundary the slope is 0.
    pub(crate) fn term(&self, d: f64, y: u8) -> Result<Term> {
        match self.kind {
            LossKind::Standard => match y {
                1 => Ok(Term {
                    value: d,
                    slope: 1.0,
                }),
                0 if self.margin - d > 0.0 => Ok(Term {
                    value: self.margin - d,
                    slope: -1.0,
                }),
                0 => Ok(Term {
                    value: 0.0,
                    slope: 0.0,
                }),
                other => Err(Error::InvalidConfig(format!(
                    "standard loss needs binary relevance, got {other}"
                ))),
            },
            LossKind::Modified => match y {
                0 if self.margin - d * d > 0.0 => Ok(Term {
                    value: self.margin - d * d,
                    slope: -2.0 * d,
                }),
                0 => Ok(Term {
                    value: 0.0,
                    slope: 0.0,
                }),
                1..=3 => {
                    let w = (self.grade_scale * f64::from(y)).powi(2);
                    Ok(Term {
                        value: w * d,
                        slope: w,
                    })
                }
                other => Err(Error::GradeOutOfRange(i64::from(other))),
            },
        }
    }

    /// Whether the pair's hinge is strictly active.
    pub(crate) fn hinge_active(&self, d: f64, y: u8) -> bool {
        y == 0
            && match self.kind {
                LossKind::Standard => self.margin - d > 0.0,
                LossKind::Modified => self.margin - d * d > 0.0,
            }
    }

    /// Batch loss for `(d, y)` pairs under the configured kind.
    pub fn loss(&self, pairs: &[(f64, u8)]) -> Result<f64> {
        self.validate()?;
        if pairs.is_empty() {
            return Err(Error::Empty("loss over an empty batch".into()));
        }
        let mut total = 0.0;
        for &(d, y) in pairs {
            total += self.term(d, y)?.value;
        }
        Ok(total / (2.0 * pairs.len() as f64))
    }
}

/// Binary contrastive loss; `cfg.kind` is ignored.
pub fn loss_standard(pairs: &[(f64, u8)], cfg: &LossConfig) -> Result<f64> {
    LossConfig {
        kind: LossKind::Standard,
        ..cfg.clone()
    }
    .loss(pairs)
}

/// Graded contrastive loss; `cfg.kind` is ignored.
pub fn loss_modified(pairs: &[(f64, u8)], cfg: &LossConfig) -> Result<f64> {
    LossConfig {
        kind: LossKind::Modified,
        ..cfg.clone()
    }
    .loss(pairs)
}
