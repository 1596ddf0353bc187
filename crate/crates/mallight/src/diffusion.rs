//! Influence modeling on the road graph: truncated diffusion over powers of
//! the random-walk transition matrix, the malfunction-masked diffusion
//! convolution with trainable per-step filters, and diffusion-based reward
//! reshaping.
//!
//! The mask is broadcast column-wise: column `j` of every matrix power
//! survives only when intersection `j` is malfunctioning, so aggregated
//! states and rewards draw exclusively from malfunctioning sources. Local
//! information re-enters through the additive aggregation steps.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::network::TransitionMatrix;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("restart probability must lie in (0,1), got {0}")]
    BadAlpha(f64),
    #[error("diffusion steps must be >= 1")]
    BadSteps,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("mask length {mask} does not match network size {nodes}")]
    MaskLength { mask: usize, nodes: usize },
    #[error("filter count {filters} does not match diffusion steps {steps}")]
    FilterCount { filters: usize, steps: usize },
    #[error("power {k} drifted from row-stochastic (max deviation {dev:e})")]
    DriftingPower { k: usize, dev: f64 },
}

/// Binary vector flagging malfunctioning intersections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalfunctionMask {
    values: Vec<bool>,
}

impl MalfunctionMask {
    pub fn empty(n: usize) -> Self {
        Self {
            values: vec![false; n],
        }
    }

    pub fn all(n: usize) -> Self {
        Self {
            values: vec![true; n],
        }
    }

    pub fn from_set(n: usize, malfunctioning: &[usize]) -> Result<Self, DiffusionError> {
        let mut values = vec![false; n];
        for &j in malfunctioning {
            if j >= n {
                return Err(DiffusionError::MaskLength { mask: j, nodes: n });
            }
            values[j] = true;
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.values.iter().all(|&m| !m)
    }

    pub fn is_set(&self, j: usize) -> bool {
        self.values[j]
    }

    pub fn set_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.values[j]).collect()
    }
}

/// Trainable per-step filter weights of the masked diffusion convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFilters {
    theta: Vec<f64>,
}

impl DiffusionFilters {
    /// Uniform initialization `1/K`, approximating an unweighted multi-hop
    /// average before any training.
    pub fn uniform(k: usize) -> Self {
        Self {
            theta: vec![1.0 / k as f64; k],
        }
    }

    /// Unit weights: the fixed, non-trainable operator used by the reward
    /// path and by the fixed-aggregation ablation.
    pub fn unit(k: usize) -> Self {
        Self {
            theta: vec![1.0; k],
        }
    }

    pub fn from_values(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn values(&self) -> &[f64] {
        &self.theta
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Precomputed masked powers of the transition matrix.
///
/// Built once per (network, malfunction set) and shared read-only; rebuild
/// whenever the malfunction set changes.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    /// `(D_O^{-1} W)^k` with well-functioning columns zeroed, k = 1..=K.
    masked_powers: Vec<Array2<f64>>,
    /// Unweighted sum of the masked powers; the fixed reward operator.
    masked_sum: Array2<f64>,
    /// Unmasked powers, kept for influence analysis.
    powers: Vec<Array2<f64>>,
    mask: MalfunctionMask,
    steps: usize,
}

impl DiffusionOperator {
    pub fn new(
        transition: &TransitionMatrix,
        mask: MalfunctionMask,
        steps: usize,
    ) -> Result<Self, DiffusionError> {
        if steps < 1 {
            return Err(DiffusionError::BadSteps);
        }
        let n = transition.order();
        if mask.len() != n {
            return Err(DiffusionError::MaskLength {
                mask: mask.len(),
                nodes: n,
            });
        }
        let t = transition.values();
        let mut powers = Vec::with_capacity(steps);
        let mut current = t.clone();
        for k in 1..=steps {
            let dev = current
                .rows()
                .into_iter()
                .map(|row| (row.sum() - 1.0).abs())
                .fold(0.0f64, f64::max);
            if dev > 1e-8 {
                return Err(DiffusionError::DriftingPower { k, dev });
            }
            powers.push(current.clone());
            if k < steps {
                current = current.dot(t);
            }
        }
        let masked_powers: Vec<Array2<f64>> = powers
            .iter()
            .map(|p| {
                let mut m = p.clone();
                for j in 0..n {
                    if !mask.is_set(j) {
                        m.column_mut(j).fill(0.0);
                    }
                }
                m
            })
            .collect();
        let mut masked_sum = Array2::zeros((n, n));
        for m in &masked_powers {
            masked_sum += m;
        }
        Ok(Self {
            masked_powers,
            masked_sum,
            powers,
            mask,
            steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn order(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &MalfunctionMask {
        &self.mask
    }

    pub fn masked_power(&self, k: usize) -> &Array2<f64> {
        &self.masked_powers[k - 1]
    }

    /// Unmasked `(D_O^{-1} W)^k`.
    pub fn power(&self, k: usize) -> &Array2<f64> {
        &self.powers[k - 1]
    }

    /// Unweighted sum of the unmasked powers, used for influence analysis.
    pub fn power_sum(&self) -> Array2<f64> {
        let n = self.order();
        let mut sum = Array2::zeros((n, n));
        for p in &self.powers {
            sum += p;
        }
        sum
    }

    /// The combined state-aggregation operator
    /// `A = sum_k theta_k * masked_power(k)`.
    pub fn combined(&self, filters: &DiffusionFilters) -> Result<Array2<f64>, DiffusionError> {
        if filters.len() != self.steps {
            return Err(DiffusionError::FilterCount {
                filters: filters.len(),
                steps: self.steps,
            });
        }
        let n = self.order();
        let mut a = Array2::zeros((n, n));
        for (k, p) in self.masked_powers.iter().enumerate() {
            a.scaled_add(filters.values()[k], p);
        }
        Ok(a)
    }
}

fn check_state_shape(s: &Array2<f64>, n: usize) -> Result<(), DiffusionError> {
    if s.nrows() != n {
        return Err(DiffusionError::ShapeMismatch {
            expected: format!("{n} state rows"),
            got: format!("{}", s.nrows()),
        });
    }
    Ok(())
}

/// Truncated restart-weighted diffusion
/// `sum_{k=1..K} alpha (1-alpha)^k (D_O^{-1} W)^k`; analysis/plots only,
/// not part of the training path.
pub fn stationary_distribution(
    transition: &TransitionMatrix,
    alpha: f64,
    steps: usize,
) -> Result<Array2<f64>, DiffusionError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DiffusionError::BadAlpha(alpha));
    }
    if steps < 1 {
        return Err(DiffusionError::BadSteps);
    }
    let t = transition.values();
    let n = transition.order();
    let mut out = Array2::zeros((n, n));
    let mut power = t.clone();
    let mut coeff = alpha;
    for k in 1..=steps {
        coeff *= 1.0 - alpha;
        out.scaled_add(coeff, &power);
        if k < steps {
            power = power.dot(t);
        }
    }
    Ok(out)
}

/// Masked diffusion convolution: `S' = [sum_k theta_k masked_power(k)] S`,
/// applied identically to every feature column.
pub fn masked_diffusion_conv(
    states: &Array2<f64>,
    op: &DiffusionOperator,
    filters: &DiffusionFilters,
) -> Result<Array2<f64>, DiffusionError> {
    check_state_shape(states, op.order())?;
    let a = op.combined(filters)?;
    Ok(a.dot(states))
}

/// Elementwise sum of the aggregated and local state matrices.
pub fn aggregate_state(
    s_prime: &Array2<f64>,
    s: &Array2<f64>,
) -> Result<Array2<f64>, DiffusionError> {
    if s_prime.dim() != s.dim() {
        return Err(DiffusionError::ShapeMismatch {
            expected: format!("{:?}", s.dim()),
            got: format!("{:?}", s_prime.dim()),
        });
    }
    Ok(s_prime + s)
}

/// Reward diffusion `R' = [sum_k masked_power(k)] R`; no trainable
/// parameters.
pub fn aggregate_reward(
    rewards: &Array1<f64>,
    op: &DiffusionOperator,
) -> Result<Array1<f64>, DiffusionError> {
    if rewards.len() != op.order() {
        return Err(DiffusionError::ShapeMismatch {
            expected: format!("{} rewards", op.order()),
            got: format!("{}", rewards.len()),
        });
    }
    Ok(op.masked_sum.dot(rewards))
}

/// Final reward `R'' = R + R'`; with an empty mask this is the identity on
/// the local rewards.
pub fn final_reward(
    rewards: &Array1<f64>,
    aggregated: &Array1<f64>,
) -> Result<Array1<f64>, DiffusionError> {
    if rewards.len() != aggregated.len() {
        return Err(DiffusionError::ShapeMismatch {
            expected: format!("{} rewards", rewards.len()),
            got: format!("{}", aggregated.len()),
        });
    }
    Ok(rewards + aggregated)
}

/// Gradients of the masked convolution plus additive aggregation.
///
/// For a loss `L` with upstream gradient `G = dL/dS''` where
/// `S'' = A S + S`:
/// `dL/dtheta_k = <G, masked_power(k) S>` and
/// `dL/dS = A^T G + G`.
pub fn conv_backward(
    upstream: &Array2<f64>,
    states: &Array2<f64>,
    op: &DiffusionOperator,
    filters: &DiffusionFilters,
) -> Result<(Vec<f64>, Array2<f64>), DiffusionError> {
    check_state_shape(states, op.order())?;
    if upstream.dim() != states.dim() {
        return Err(DiffusionError::ShapeMismatch {
            expected: format!("{:?}", states.dim()),
            got: format!("{:?}", upstream.dim()),
        });
    }
    if filters.len() != op.steps() {
        return Err(DiffusionError::FilterCount {
            filters: filters.len(),
            steps: op.steps(),
        });
    }
    let mut d_theta = Vec::with_capacity(op.steps());
    for k in 1..=op.steps() {
        let propagated = op.masked_power(k).dot(states);
        d_theta.push((upstream * &propagated).sum());
    }
    let a = op.combined(filters)?;
    let d_states = a.t().dot(upstream) + upstream;
    Ok((d_theta, d_states))
}
