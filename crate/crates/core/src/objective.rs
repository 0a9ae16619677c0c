//! Cosine similarity and the bidirectional triplet ranking loss.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanError};
use crate::tensor::Tensor;

/// How in-batch negatives are aggregated per matched pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Sum of hinge terms over every other batch member.
    #[default]
    SumAll,
    /// Only the largest hinge term per direction.
    Hardest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub margin: f64,
    #[serde(default)]
    pub negative_mode: NegativeMode,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            margin: 0.2,
            negative_mode: NegativeMode::SumAll,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(SanError::Config(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// `⟨a,b⟩ / (‖a‖‖b‖)`, clamped to `[-1, 1]`. Degenerate (near-zero) vectors
/// are an error rather than a silent zero.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(crate::tensor::cosine_parts(a, b)?.0.clamp(-1.0, 1.0))
}

/// Loss over a `[B×B]` similarity matrix with `S[i][j] = s(I_i, T_j)`.
pub fn triplet_loss(sim: &Tensor, cfg: &MarginConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(triplet_value_and_grad(sim, cfg.margin, cfg.negative_mode)?.0)
}

/// Loss value and its (sub)gradient with respect to the similarity matrix.
///
/// For matched pair `i` the image negatives are the column terms `S[j][i]`
/// and the sentence negatives the row terms `S[i][j]`, `j ≠ i`.
pub(crate) fn triplet_value_and_grad(sim: &Tensor, margin: f64, mode: NegativeMode) -> Result<(f64, Tensor)> {
    let b = match *sim.shape() {
        [r, c] if r == c => r,
        _ => return Err(SanError::shape("triplet_loss", sim.shape(), &[0, 0])),
    };
    if b < 2 {
        return Err(SanError::Usage(format!(
            "triplet loss needs at least 2 pairs for negatives, got {b}"
        )));
    }
    let s = |i: usize, j: usize| sim.data()[i * b + j];
    let mut grad = Tensor::zeros(&[b, b]);
    let mut loss = 0.0;
    for i in 0..b {
        let base = margin - s(i, i);
        // (value, index of the negative's entry)
        let image_terms = (0..b).filter(|&j| j != i).map(|j| (base + s(j, i), j * b + i));
        let sentence_terms = (0..b).filter(|&j| j != i).map(|j| (base + s(i, j), i * b + j));
        for family in [image_terms.collect::<Vec<_>>(), sentence_terms.collect()] {
            let active: Vec<(f64, usize)> = match mode {
                NegativeMode::SumAll => family.into_iter().filter(|(v, _)| *v > 0.0).collect(),
                NegativeMode::Hardest => family
                    .into_iter()
                    .fold(None, |best: Option<(f64, usize)>, t| match best {
                        Some(bt) if bt.0 >= t.0 => Some(bt),
                        _ => Some(t),
                    })
                    .filter(|(v, _)| *v > 0.0)
                    .into_iter()
                    .collect(),
            };
            for (v, idx) in active {
                loss += v;
                grad.data_mut()[idx] += 1.0;
                grad.data_mut()[i * b + i] -= 1.0;
            }
        }
    }
    Ok((loss, grad))
}
