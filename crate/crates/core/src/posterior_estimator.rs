//! Computable residual certificates: how far a trajectory bundle is from
//! solving the discrete optimality system and the market-clearing constraint.
//!
//! Two mean-square residuals are reported. The balance residual averages the
//! squared clearing defect over samples and the whole grid (K+1 points). The
//! optimality residual splits into a drift part, summed over the K forward
//! differences of the reconstructed adjoint, and a terminal part, the
//! mismatch with the terminal condition; drift residuals are normalized by
//! 1/(J N K) and the terminal term is counted once per (sample, agent) with
//! normalizer 1/(J N). Both estimators are deterministic functions of the
//! batch.

use serde::Serialize;

use crate::market_model::MarketModel;
use crate::particle_system::ParticleBatch;

/// Residual summary for one evaluation batch.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PosteriorReport {
    /// Optimality residual: drift + terminal components.
    pub mse_eh: f64,
    /// Market-clearing residual.
    pub mse_eb: f64,
    pub drift_component: f64,
    pub terminal_component: f64,
    /// Monte-Carlo sample count J.
    pub n_samples: usize,
    /// Population size N.
    pub n_agents: usize,
    /// Time steps K.
    pub steps: usize,
}

/// Mean-square market-clearing residual:
/// `1/(J (K+1)) sum_j sum_{k=0..K} ((1/N) sum_n v - Q_k)^2`.
pub fn mse_balance(batch: &ParticleBatch) -> f64 {
    assert!(!batch.samples.is_empty(), "empty batch");
    let mut total = 0.0;
    let mut terms = 0usize;
    for sample in &batch.samples {
        let n = sample.n_agents() as f64;
        for k in 0..=sample.steps() {
            let mean_v: f64 = sample.controls.iter().map(|row| row[k]).sum::<f64>() / n;
            let defect = mean_v - sample.supply.q[k];
            total += defect * defect;
            terms += 1;
        }
    }
    total / terms as f64
}

/// Drift and terminal components of the optimality residual.
#[derive(Clone, Copy, Debug)]
pub struct HamiltonianResidual {
    pub drift_component: f64,
    pub terminal_component: f64,
}

impl HamiltonianResidual {
    pub fn total(&self) -> f64 {
        self.drift_component + self.terminal_component
    }
}

/// Mean-square optimality residual of the reconstructed adjoints:
/// drift `1/(J N K) sum_{j,n,k<K} (dP_k + dt L_x(X_k, v_k))^2` plus terminal
/// `1/(J N) sum_{j,n} (u_T'(X_K) - P_K)^2`.
pub fn mse_hamiltonian(model: &MarketModel, batch: &ParticleBatch) -> HamiltonianResidual {
    assert!(!batch.samples.is_empty(), "empty batch");
    let mut drift = 0.0;
    let mut terminal = 0.0;
    let mut drift_terms = 0usize;
    let mut terminal_terms = 0usize;
    for sample in &batch.samples {
        assert!(
            sample.has_adjoints(),
            "adjoints must be reconstructed before estimating the optimality residual"
        );
        let k_steps = sample.steps();
        assert!(k_steps >= 1, "need at least one time step");
        let dt = sample.supply.dt;
        for a in 0..sample.n_agents() {
            for k in 0..k_steps {
                let dp = sample.adjoints[a][k + 1] - sample.adjoints[a][k];
                let lx = (model.lagrangian_dx)(sample.states[a][k], sample.controls[a][k]);
                let r = dp + dt * lx;
                drift += r * r;
                drift_terms += 1;
            }
            let r = (model.terminal_cost_dx)(sample.states[a][k_steps]) - sample.adjoints[a][k_steps];
            terminal += r * r;
            terminal_terms += 1;
        }
    }
    HamiltonianResidual {
        drift_component: drift / drift_terms as f64,
        terminal_component: terminal / terminal_terms as f64,
    }
}

/// Both residuals of one batch as a report.
pub fn evaluate(model: &MarketModel, batch: &ParticleBatch) -> PosteriorReport {
    let residual = mse_hamiltonian(model, batch);
    PosteriorReport {
        mse_eh: residual.total(),
        mse_eb: mse_balance(batch),
        drift_component: residual.drift_component,
        terminal_component: residual.terminal_component,
        n_samples: batch.n_samples(),
        n_agents: batch.n_agents(),
        steps: batch.steps(),
    }
}

/// Monitoring quantity `C_hint (sqrt(mse_eh) + sqrt(mse_eb))`.
///
/// The true stability constant of the error bound is unknown, so this is a
/// trend indicator, not a proven bound.
pub fn certificate(report: &PosteriorReport, c_hint: f64) -> f64 {
    c_hint * (report.mse_eh.sqrt() + report.mse_eb.sqrt())
}
