//! Sim-to-real transfer diagnostics: the virtual-to-real error bound, the
//! real-world improvement lower bound, and its monotonicity in tool
//! capability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Tool capability, in `[0, 1]`.
    pub c_tool: f64,
    /// Divergence of the trained policy from the supervised prior, `≥ 0`.
    pub d_kl: f64,
    /// Plan sufficiency, in `[0, 1]`.
    pub phi_plan: f64,
    pub r_result: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Anchoring strength of the supervised prior, in `(0, 1]`.
    pub kappa: f64,
    /// Expected virtual-reward increment, `≥ 0`.
    pub delta_r_vrt: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("{field} = {value} is outside {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("C_tool grid must be ascending within [0, 1]")]
    BadGrid,
    #[error("at least one divergence value is required")]
    EmptyDivergences,
    #[error("divergence #{index} = {value} is negative or not finite")]
    BadDivergence { index: usize, value: f64 },
}

impl BoundInputs {
    pub fn validate(&self) -> Result<(), BoundError> {
        let check = |field, value: f64, ok: bool, range| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(BoundError::OutOfRange { field, value, range })
            }
        };
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        check("c_tool", self.c_tool, unit(self.c_tool), "[0, 1]")?;
        check("d_kl", self.d_kl, self.d_kl >= 0.0, "[0, inf)")?;
        check("phi_plan", self.phi_plan, unit(self.phi_plan), "[0, 1]")?;
        check("r_result", self.r_result, unit(self.r_result), "[0, 1]")?;
        check("delta", self.delta, self.delta >= 0.0, "[0, inf)")?;
        check("alpha", self.alpha, self.alpha >= 0.0, "[0, inf)")?;
        check("beta", self.beta, self.beta >= 0.0, "[0, inf)")?;
        check("kappa", self.kappa, self.kappa > 0.0 && self.kappa <= 1.0, "(0, 1]")?;
        check("delta_r_vrt", self.delta_r_vrt, self.delta_r_vrt >= 0.0, "[0, inf)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    /// `δ(1 − C_tool)`
    pub dynamics_gap: f64,
    /// `α·D_KL`
    pub action_bias_bound: f64,
    /// `β(1 − Φ_plan·R_result)`
    pub goal_alignment_error: f64,
    pub error_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub dynamics_gap: f64,
    pub action_bias_bound: f64,
    pub goal_alignment_error: f64,
    pub error_bound: f64,
    /// `Γ = C_tool·Φ_plan·κ`
    pub gamma_coeff: f64,
    /// `Γ·E[ΔR_vrt]`
    pub causal_improvement: f64,
    pub improvement_lower_bound: f64,
    pub positive_transfer: bool,
}

pub fn error_bound(inputs: &BoundInputs) -> Result<ErrorBound, BoundError> {
    inputs.validate()?;
    let dynamics_gap = inputs.delta * (1.0 - inputs.c_tool);
    let action_bias_bound = inputs.alpha * inputs.d_kl;
    let goal_alignment_error = inputs.beta * (1.0 - inputs.phi_plan * inputs.r_result);
    Ok(ErrorBound {
        dynamics_gap,
        action_bias_bound,
        goal_alignment_error,
        error_bound: dynamics_gap + action_bias_bound + goal_alignment_error,
    })
}

pub fn improvement_lower_bound(inputs: &BoundInputs) -> Result<BoundReport, BoundError> {
    let e = error_bound(inputs)?;
    let gamma_coeff = inputs.c_tool * inputs.phi_plan * inputs.kappa;
    let causal_improvement = gamma_coeff * inputs.delta_r_vrt;
    Ok(BoundReport {
        dynamics_gap: e.dynamics_gap,
        action_bias_bound: e.action_bias_bound,
        goal_alignment_error: e.goal_alignment_error,
        error_bound: e.error_bound,
        gamma_coeff,
        causal_improvement,
        improvement_lower_bound: causal_improvement - e.error_bound,
        positive_transfer: causal_improvement >= e.error_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub c_tool: f64,
    pub lower_bound: f64,
}

/// Lower bound along an ascending grid of `C_tool`, other inputs fixed.
pub fn monotonicity_scan(inputs: &BoundInputs, grid: &[f64]) -> Result<Vec<ScanPoint>, BoundError> {
    if grid.iter().any(|c| !(0.0..=1.0).contains(c)) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(BoundError::BadGrid);
    }
    grid.iter()
        .map(|&c| {
            let r = improvement_lower_bound(&BoundInputs { c_tool: c, ..*inputs })?;
            Ok(ScanPoint {
                c_tool: c,
                lower_bound: r.improvement_lower_bound,
            })
        })
        .collect()
}

/// `n + 1` evenly spaced points on `[0, 1]`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Mean of per-step divergences.
pub fn aggregate_kl(divergences: &[f64]) -> Result<f64, BoundError> {
    if divergences.is_empty() {
        return Err(BoundError::EmptyDivergences);
    }
    for (index, &value) in divergences.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(BoundError::BadDivergence { index, value });
        }
    }
    Ok(divergences.iter().sum::<f64>() / divergences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> BoundInputs {
        BoundInputs {
            c_tool: 0.9,
            d_kl: 0.05,
            phi_plan: 0.95,
            r_result: 0.95,
            delta: 1.0,
            alpha: 1.0,
            beta: 1.0,
            kappa: 1.0,
            delta_r_vrt: 0.0,
        }
    }

    #[test]
    fn error_bound_cases() {
        let e = error_bound(&base()).unwrap();
        assert!((e.error_bound - 0.2475).abs() < 1e-12);
        assert_eq!(
            e.error_bound,
            e.dynamics_gap + e.action_bias_bound + e.goal_alignment_error
        );

        let closed = BoundInputs {
            c_tool: 1.0,
            d_kl: 0.0,
            phi_plan: 1.0,
            r_result: 1.0,
            ..base()
        };
        assert_eq!(error_bound(&closed).unwrap().error_bound, 0.0);

        let no_beta = BoundInputs { beta: 0.0, ..base() };
        assert_eq!(error_bound(&no_beta).unwrap().goal_alignment_error, 0.0);
    }

    #[test]
    fn improvement_cases() {
        let r = improvement_lower_bound(&base()).unwrap();
        assert_eq!(r.improvement_lower_bound, -r.error_bound);

        let worked = BoundInputs {
            c_tool: 0.95,
            d_kl: 0.02,
            phi_plan: 0.95,
            delta_r_vrt: 0.95,
            ..base()
        };
        let r = improvement_lower_bound(&worked).unwrap();
        assert!((r.gamma_coeff - 0.9025).abs() < 1e-12);
        assert!((r.causal_improvement - 0.857375).abs() < 1e-12);
        assert!((r.error_bound - 0.1675).abs() < 1e-12);
        assert!((r.improvement_lower_bound - 0.6899).abs() < 1e-4);
        assert!(r.positive_transfer);

        let weak = BoundInputs { kappa: 1e-6, ..worked };
        assert!(!improvement_lower_bound(&weak).unwrap().positive_transfer);
    }

    #[test]
    fn validation_names_the_field() {
        let bad = BoundInputs { kappa: 0.0, ..base() };
        assert!(matches!(
            error_bound(&bad),
            Err(BoundError::OutOfRange { field: "kappa", .. })
        ));
        let bad = BoundInputs { c_tool: 1.5, ..base() };
        assert!(matches!(
            error_bound(&bad),
            Err(BoundError::OutOfRange { field: "c_tool", .. })
        ));
        let bad = BoundInputs {
            d_kl: f64::NAN,
            ..base()
        };
        assert!(matches!(
            error_bound(&bad),
            Err(BoundError::OutOfRange { field: "d_kl", .. })
        ));
    }

    #[test]
    fn scan_cases() {
        let inputs = BoundInputs {
            delta_r_vrt: 0.5,
            ..base()
        };
        let s = monotonicity_scan(&inputs, &[0.0, 0.5, 1.0]).unwrap();
        assert!(s[0].lower_bound < s[1].lower_bound && s[1].lower_bound < s[2].lower_bound);
        let flat = BoundInputs { delta: 0.0, ..base() };
        let s = monotonicity_scan(&flat, &uniform_grid(4)).unwrap();
        assert!(s.iter().all(|p| p.lower_bound == s[0].lower_bound));
        assert_eq!(monotonicity_scan(&inputs, &[0.5, 0.2]), Err(BoundError::BadGrid));
    }

    #[test]
    fn kl_aggregation() {
        assert_eq!(aggregate_kl(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((aggregate_kl(&[0.1, 0.3]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(aggregate_kl(&[0.7]).unwrap(), 0.7);
        assert_eq!(aggregate_kl(&[]), Err(BoundError::EmptyDivergences));
        assert!(aggregate_kl(&[0.1, -1.0]).is_err());
    }
}
