//! Late fusion of similarity scores from several global descriptors.
//!
//! Score operators work on per-descriptor scores already scaled to `[0, 1]`
//! (see [`normalize_scores`]); round robin merges rankings instead.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMethod {
    Mean,
    Power,
    Min,
    Max,
    /// `beta * sum(rho_i s_i) + (1 - beta) * prod(s_i ^ rho_i)`
    Wmp,
    /// `(1 - beta) * max(s_i) + beta * min(s_i)`
    Wmm,
    /// Generalized f-mean with `f(x) = 1 / (gamma + x)` over `x_i = alpha_i s_i`.
    Gharm,
    RoundRobin,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 8] = [
        FusionMethod::Mean,
        FusionMethod::Power,
        FusionMethod::Min,
        FusionMethod::Max,
        FusionMethod::Wmp,
        FusionMethod::Wmm,
        FusionMethod::Gharm,
        FusionMethod::RoundRobin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Mean => "mean",
            FusionMethod::Power => "power",
            FusionMethod::Min => "min",
            FusionMethod::Max => "max",
            FusionMethod::Wmp => "wmp",
            FusionMethod::Wmm => "wmm",
            FusionMethod::Gharm => "gharm",
            FusionMethod::RoundRobin => "round_robin",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase().replace('-', "_");
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.name() == lower || (lower == "roundrobin" && *m == FusionMethod::RoundRobin))
            .ok_or_else(|| FusionError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("expected {expected} weights, got {got}")]
    WeightShapeMismatch { expected: usize, got: usize },
    #[error("score lists have different lengths")]
    LengthMismatch,
    #[error("invalid fusion parameter: {0}")]
    InvalidParams(String),
    #[error("unknown fusion method `{0}`")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub method: FusionMethod,
    /// Weights for mean, power and wmp; `None` means `1/n` each.
    pub rho: Option<Vec<f64>>,
    /// Weights for gharm, summing to one; `None` means `1/n` each.
    pub alpha: Option<Vec<f64>>,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self::new(FusionMethod::Mean)
    }
}

impl FusionParams {
    pub fn new(method: FusionMethod) -> Self {
        Self { method, rho: None, alpha: None, beta: 0.5, gamma: 1.0 }
    }

    fn weights(given: &Option<Vec<f64>>, n: usize) -> Result<Vec<f64>, FusionError> {
        match given {
            None => Ok(vec![1.0 / n as f64; n]),
            Some(w) if w.len() != n => {
                Err(FusionError::WeightShapeMismatch { expected: n, got: w.len() })
            }
            Some(w) if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) => {
                Err(FusionError::InvalidParams("weights must be finite and non-negative".into()))
            }
            Some(w) => Ok(w.clone()),
        }
    }

    fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(FusionError::InvalidParams(format!("beta {} not in [0, 1]", self.beta)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(FusionError::InvalidParams(format!("gamma {} must be > 0", self.gamma)));
        }
        Ok(())
    }
}

/// Min-max scales each list to `[0, 1]`; a constant list maps to all ones.
pub fn normalize_scores(lists: &[Vec<f64>]) -> Vec<Vec<f64>> {
    lists
        .iter()
        .map(|list| {
            let lo = list.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            if !(range > 0.0) {
                vec![1.0; list.len()]
            } else {
                list.iter().map(|s| ((s - lo) / range).clamp(0.0, 1.0)).collect()
            }
        })
        .collect()
}

/// Fuses `n` aligned score lists element-wise; higher is better.
///
/// Round robin does not fuse scores; use [`round_robin`] on rankings instead.
pub fn fuse_scores(params: &FusionParams, scores: &[Vec<f64>]) -> Result<Vec<f64>, FusionError> {
    params.validate()?;
    let n = scores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let len = scores[0].len();
    if scores.iter().any(|s| s.len() != len) {
        return Err(FusionError::LengthMismatch);
    }
    let column = |j: usize| scores.iter().map(move |s| s[j]);
    let fused = match params.method {
        FusionMethod::Mean => {
            let rho = FusionParams::weights(&params.rho, n)?;
            (0..len).map(|j| weighted_sum(&rho, column(j))).collect()
        }
        FusionMethod::Power => {
            let rho = FusionParams::weights(&params.rho, n)?;
            (0..len).map(|j| powered_product(&rho, column(j))).collect()
        }
        FusionMethod::Min => (0..len)
            .map(|j| column(j).fold(f64::INFINITY, f64::min))
            .collect(),
        FusionMethod::Max => (0..len)
            .map(|j| column(j).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        FusionMethod::Wmp => {
            let rho = FusionParams::weights(&params.rho, n)?;
            let b = params.beta;
            (0..len)
                .map(|j| b * weighted_sum(&rho, column(j)) + (1.0 - b) * powered_product(&rho, column(j)))
                .collect()
        }
        FusionMethod::Wmm => {
            let b = params.beta;
            (0..len)
                .map(|j| {
                    let hi = column(j).fold(f64::NEG_INFINITY, f64::max);
                    let lo = column(j).fold(f64::INFINITY, f64::min);
                    (1.0 - b) * hi + b * lo
                })
                .collect()
        }
        FusionMethod::Gharm => {
            let alpha = FusionParams::weights(&params.alpha, n)?;
            let total: f64 = alpha.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(FusionError::InvalidParams(format!(
                    "gharm weights sum to {total}, expected 1"
                )));
            }
            let g = params.gamma;
            (0..len)
                .map(|j| {
                    let mean_f = column(j)
                        .zip(&alpha)
                        .map(|(s, a)| 1.0 / (g + a * s))
                        .sum::<f64>()
                        / n as f64;
                    1.0 / mean_f - g
                })
                .collect()
        }
        FusionMethod::RoundRobin => {
            return Err(FusionError::InvalidParams(
                "round robin merges rankings, not scores".into(),
            ))
        }
    };
    Ok(fused)
}

fn weighted_sum(w: &[f64], s: impl Iterator<Item = f64>) -> f64 {
    s.zip(w).map(|(s, w)| w * s).sum()
}

fn powered_product(w: &[f64], s: impl Iterator<Item = f64>) -> f64 {
    s.zip(w).map(|(s, w)| s.powf(*w)).product()
}

/// Merges rankings by taking the next unseen element of each list in turn.
pub fn round_robin<T: Clone + Eq + std::hash::Hash>(lists: &[Vec<T>]) -> Vec<T> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut cursors = vec![0usize; lists.len()];
    loop {
        let mut progressed = false;
        for (list, cursor) in lists.iter().zip(cursors.iter_mut()) {
            while *cursor < list.len() {
                let item = &list[*cursor];
                *cursor += 1;
                if seen.insert(item.clone()) {
                    out.push(item.clone());
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            return out;
        }
    }
}
