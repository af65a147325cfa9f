//! Ordered multi-scale controller.
//!
//! Raw gap parameters map to strictly increasing log-scale centers, soft
//! scale-selection weights, expected patch sizes, and strictly decreasing
//! locality slopes. The whole map is differentiable in the raw gaps, so the
//! controller is evaluated inside the graph during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Guard added inside the entropy logarithm.
pub const ENTROPY_EPS: f64 = 1e-8;

/// Raw controller parameters: K+1 unconstrained gaps plus fixed knobs.
#[derive(Debug, Clone)]
pub struct ControllerParams {
    /// Raw gaps eta_0..eta_K (K+1 entries for K sources). Trainable.
    pub raw_gaps: Tensor,
    pub knobs: ControllerKnobs,
}

/// Fixed controller hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ControllerKnobs {
    /// Additive floor on softplus gaps.
    pub gap_floor: f64,
    /// Scale-softmax temperature.
    pub temperature: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Minimum center gap for the hinge penalty; None derives
    /// (a_max - a_min) / (2 (K + 1)) at model construction.
    pub min_center_gap: Option<f64>,
}

impl Default for ControllerKnobs {
    fn default() -> Self {
        ControllerKnobs {
            gap_floor: 1e-3,
            temperature: 4.0,
            alpha_min: 0.01,
            alpha_max: 1.0,
            min_center_gap: None,
        }
    }
}

impl ControllerKnobs {
    pub fn validate(&self) -> Result<()> {
        if !(self.gap_floor > 0.0) {
            return Err(Error::Config("controller gap floor must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("controller temperature must be positive".into()));
        }
        if !(0.0 < self.alpha_min && self.alpha_min < self.alpha_max) {
            return Err(Error::Config(format!(
                "locality slope bounds must satisfy 0 < alpha_min < alpha_max, got ({}, {})",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }

    /// Hinge threshold for the center-gap penalty.
    pub fn center_gap(&self, log_scales: &[f64], k: usize) -> f64 {
        self.min_center_gap.unwrap_or_else(|| {
            let a_min = log_scales.iter().cloned().fold(f64::INFINITY, f64::min);
            let a_max = log_scales.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (a_max - a_min) / (2.0 * (k + 1) as f64)
        })
    }
}

impl ControllerParams {
    /// Raw gaps initialized to zero: equal gaps, evenly spread centers.
    pub fn new(k: usize, knobs: ControllerKnobs) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("need at least one source".into()));
        }
        knobs.validate()?;
        Ok(ControllerParams {
            raw_gaps: Tensor::zeros(&[k + 1]).with_grad(),
            knobs,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.raw_gaps.numel() - 1
    }
}

/// Controller quantities as graph variables (all differentiable in eta).
pub struct ControllerVars {
    /// Ordered coordinates u_k in (0,1), shape [K, 1].
    pub u: Var,
    /// Ordered log-scale centers c_k, shape [K, 1].
    pub centers: Var,
    /// Row-stochastic scale weights, shape [K, R].
    pub pi: Var,
    /// Expected log-scales, shape [K, 1].
    pub expected_log_scale: Var,
    /// Expected patch sizes exp(abar_k), shape [K, 1].
    pub expected_patch: Var,
    /// Locality slopes alpha_k, shape [K, 1].
    pub alpha: Var,
}

/// Plain-value snapshot of the controller outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerOutput {
    pub u: Vec<f64>,
    pub centers: Vec<f64>,
    /// Row-major K x R.
    pub pi: Vec<Vec<f64>>,
    pub expected_log_scale: Vec<f64>,
    pub expected_patch: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ControllerVars {
    pub fn snapshot(&self) -> ControllerOutput {
        let pi = self.pi.value();
        let (k, r) = (pi.shape()[0], pi.shape()[1]);
        ControllerOutput {
            u: self.u.value().into_data(),
            centers: self.centers.value().into_data(),
            pi: (0..k)
                .map(|i| pi.data()[i * r..(i + 1) * r].to_vec())
                .collect(),
            expected_log_scale: self.expected_log_scale.value().into_data(),
            expected_patch: self.expected_patch.value().into_data(),
            alpha: self.alpha.value().into_data(),
        }
    }
}

/// Log patch sizes a_r = log P_r.
pub fn log_scales(patch_sizes: &[usize]) -> Vec<f64> {
    patch_sizes.iter().map(|&p| (p as f64).ln()).collect()
}

/// Evaluate the full controller map on the graph.
///
/// `eta` is the bound [K+1] raw-gap leaf.
pub fn compute_controller(
    graph: &Graph,
    eta: &Var,
    knobs: &ControllerKnobs,
    patch_sizes: &[usize],
) -> Result<ControllerVars> {
    knobs.validate()?;
    let r = patch_sizes.len();
    if r < 2 {
        return Err(Error::Config(
            "need at least two usable patch scales for distinct a_min and a_max".into(),
        ));
    }
    let k = eta.numel() - 1;
    if k == 0 {
        return Err(Error::Config("need at least one source".into()));
    }
    let a = log_scales(patch_sizes);
    let a_min = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let a_max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // positive gaps, their total, and prefix sums
    let deltas = eta.softplus()?.add_scalar(knobs.gap_floor)?; // [K+1]
    let total = deltas.sum()?;
    // prefix-sum matrix L[k][j] = 1 for j <= k-1, k = 1..K
    let mut ldata = vec![0.0; k * (k + 1)];
    for ki in 0..k {
        for j in 0..=ki {
            ldata[ki * (k + 1) + j] = 1.0;
        }
    }
    let lmat = graph.constant(Tensor::new(vec![k, k + 1], ldata)?)?;
    let prefix = lmat.matmul(&deltas.reshape(&[k + 1, 1])?)?; // [K,1]
    let u = prefix.div(&total)?; // [K,1]

    let centers = u.scale(a_max - a_min)?.add_scalar(a_min)?; // [K,1]

    let a_row = graph.constant(Tensor::new(vec![1, r], a.clone())?)?;
    let pi = scale_weights(&centers, &a_row, knobs.temperature)?; // [K,R]

    let abar = pi.matmul(&a_row.reshape(&[r, 1])?)?; // [K,1]
    let pbar = abar.exp()?;

    // log-linear interpolation between alpha_max (u=0) and alpha_min (u=1)
    let alpha = u
        .scale(knobs.alpha_min.ln() - knobs.alpha_max.ln())?
        .add_scalar(knobs.alpha_max.ln())?
        .exp()?;

    Ok(ControllerVars {
        u,
        centers,
        pi,
        expected_log_scale: abar,
        expected_patch: pbar,
        alpha,
    })
}

/// Soft scale-selection rows: pi_{k,r} proportional to exp(-tau (a_r - c_k)^2).
///
/// `centers` is [K, 1], `log_scale_row` is [1, R]. A zero temperature is
/// permitted (uniform rows) so limit behavior is testable.
pub fn scale_weights(centers: &Var, log_scale_row: &Var, temperature: f64) -> Result<Var> {
    let d = log_scale_row.sub(centers)?; // [K,R]
    d.square()?.scale(-temperature)?.row_softmax()
}

/// Scale entropy penalty: -(1/K) sum_k sum_r pi log(pi + eps).
pub fn entropy_penalty(pi: &Var, eps: f64) -> Result<Var> {
    let k = pi.shape()[0];
    let logp = pi.add_scalar(eps)?.log()?;
    pi.mul(&logp)?.sum()?.scale(-1.0 / k as f64)
}

/// Ordered gap penalty: mean squared hinge on center gaps below delta_c.
/// Exactly zero when K = 1.
pub fn gap_penalty(centers: &Var, delta_c: f64) -> Result<Var> {
    let k = centers.numel();
    if k == 1 {
        // differentiable zero on the same graph
        return centers.sum()?.scale(0.0);
    }
    let upper: Vec<usize> = (1..k).collect();
    let lower: Vec<usize> = (0..k - 1).collect();
    let flat = centers.reshape(&[k])?;
    let gaps = flat.gather(&upper, &[k - 1])?.sub(&flat.gather(&lower, &[k - 1])?)?;
    let hinge = gaps.neg()?.add_scalar(delta_c)?.relu()?;
    hinge.square()?.sum()?.scale(1.0 / (k - 1) as f64)
}
