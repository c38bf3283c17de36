//! Problem instances: running cost, Hamiltonian, terminal cost, supply
//! dynamics, and initial distribution, plus the supply path simulator.
//!
//! The model exposes its derivatives as plain functions instead of deriving
//! them by autodiff, because the residual estimators need them outside any
//! tape. The linear-quadratic instance ships as the default; other models
//! plug into the same function slots.

use std::sync::Arc;

use rand::Rng;

use crate::rng;

/// Scalar function of one variable.
pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Scalar function of two variables.
pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Parameters of the linear-quadratic instance
/// `L = lambda_x/2 (x - x_ref)^2 + v^2/2`, `u_T = lambda_t/2 (x - x_ref)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LqSpec {
    pub lambda_x: f64,
    pub x_ref: f64,
    pub lambda_t: f64,
}

/// One problem instance. Immutable after construction and cheap to clone
/// (all function slots are shared).
#[derive(Clone)]
pub struct MarketModel {
    /// Running cost L(x, v).
    pub lagrangian: Fn2,
    /// dL/dx.
    pub lagrangian_dx: Fn2,
    /// dL/dv.
    pub lagrangian_dv: Fn2,
    /// Hamiltonian H(x, p) = sup_v { -p v - L(x, v) }.
    pub hamiltonian: Fn2,
    /// dH/dp; the optimal control is v* = -H_p.
    pub hamiltonian_dp: Fn2,
    /// dH/dx.
    pub hamiltonian_dx: Fn2,
    /// Terminal cost u_T(x).
    pub terminal_cost: Fn1,
    /// u_T'(x).
    pub terminal_cost_dx: Fn1,
    /// Supply drift b(q, t).
    pub supply_drift: Fn2,
    /// Supply diffusion sigma(q, t).
    pub supply_diffusion: Fn2,
    /// Mean of the initial distribution.
    pub initial_mean: f64,
    /// Standard deviation of the initial distribution.
    pub initial_std: f64,
    /// Time horizon T.
    pub horizon: f64,
    /// Initial supply q0.
    pub initial_supply: f64,
    /// Set when the instance is linear-quadratic; the analytic benchmark
    /// requires it.
    pub lq: Option<LqSpec>,
}

/// One discrete supply realization with its driving Brownian increments.
#[derive(Clone, Debug, PartialEq)]
pub struct SupplyPath {
    /// Supply values, length K+1.
    pub q: Vec<f64>,
    /// Brownian increments, length K; each ~ Normal(0, dt).
    pub dw: Vec<f64>,
    /// Grid times, length K+1.
    pub t: Vec<f64>,
    /// Step size T/K.
    pub dt: f64,
}

impl SupplyPath {
    pub fn steps(&self) -> usize {
        self.dw.len()
    }
}

/// The linear-quadratic instance with the sinusoidal supply preset:
/// drift `3 sin(3 pi t) - q`, diffusion `max(0.5 sin(2 pi (t - 0.25)), 0)`,
/// initial distribution Normal(-1/4, 0.2^2), T = 1, q0 = 0.
pub fn lq_model(lambda_x: f64, x_ref: f64, lambda_t: f64) -> MarketModel {
    assert!(lambda_x >= 0.0 && lambda_t >= 0.0, "cost weights must be nonnegative");
    MarketModel {
        lagrangian: Arc::new(move |x, v| 0.5 * lambda_x * (x - x_ref).powi(2) + 0.5 * v * v),
        lagrangian_dx: Arc::new(move |x, _| lambda_x * (x - x_ref)),
        lagrangian_dv: Arc::new(|_, v| v),
        hamiltonian: Arc::new(move |x, p| 0.5 * p * p - 0.5 * lambda_x * (x - x_ref).powi(2)),
        hamiltonian_dp: Arc::new(|_, p| p),
        hamiltonian_dx: Arc::new(move |x, _| -lambda_x * (x - x_ref)),
        terminal_cost: Arc::new(move |x| 0.5 * lambda_t * (x - x_ref).powi(2)),
        terminal_cost_dx: Arc::new(move |x| lambda_t * (x - x_ref)),
        supply_drift: Arc::new(|q, t| sinusoid_drift_inhomogeneous(t) - q),
        supply_diffusion: Arc::new(|_, t| sinusoid_diffusion(t)),
        initial_mean: -0.25,
        initial_std: 0.2,
        horizon: 1.0,
        initial_supply: 0.0,
        lq: Some(LqSpec {
            lambda_x,
            x_ref,
            lambda_t,
        }),
    }
}

/// Time-dependent part of the sinusoidal supply drift.
pub fn sinusoid_drift_inhomogeneous(t: f64) -> f64 {
    3.0 * (3.0 * std::f64::consts::PI * t).sin()
}

/// Sinusoidal supply diffusion; vanishes outside t in [0.25, 0.75].
pub fn sinusoid_diffusion(t: f64) -> f64 {
    (0.5 * (2.0 * std::f64::consts::PI * (t - 0.25)).sin()).max(0.0)
}

impl MarketModel {
    /// Replace the supply coefficients, keeping costs and distribution.
    pub fn with_supply(mut self, drift: Fn2, diffusion: Fn2) -> Self {
        self.supply_drift = drift;
        self.supply_diffusion = diffusion;
        self
    }

    /// Same drift, zero diffusion.
    pub fn without_noise(mut self) -> Self {
        self.supply_diffusion = Arc::new(|_, _| 0.0);
        self
    }

    pub fn with_initial_distribution(mut self, mean: f64, std: f64) -> Self {
        self.initial_mean = mean;
        self.initial_std = std;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        assert!(horizon > 0.0);
        self.horizon = horizon;
        self
    }

    pub fn with_initial_supply(mut self, q0: f64) -> Self {
        self.initial_supply = q0;
        self
    }
}

/// i.i.d. draws from the initial distribution Normal(mean, std^2).
pub fn sample_initial<R: Rng + ?Sized>(model: &MarketModel, n: usize, rng: &mut R) -> Vec<f64> {
    assert!(n >= 1, "population size must be at least 1");
    (0..n)
        .map(|_| rng::normal(rng, model.initial_mean, model.initial_std))
        .collect()
}

/// Euler-Maruyama simulation of the supply on a K-step grid:
/// `q[k+1] = q[k] + b(q[k], t[k]) dt + sigma(q[k], t[k]) dW[k]`.
pub fn simulate_supply<R: Rng + ?Sized>(model: &MarketModel, k_steps: usize, rng: &mut R) -> SupplyPath {
    assert!(k_steps >= 1, "need at least one time step");
    let dt = model.horizon / k_steps as f64;
    let t: Vec<f64> = (0..=k_steps).map(|k| k as f64 * dt).collect();
    let dw: Vec<f64> = (0..k_steps)
        .map(|_| rng::standard_normal(rng) * dt.sqrt())
        .collect();
    let mut q = Vec::with_capacity(k_steps + 1);
    q.push(model.initial_supply);
    for k in 0..k_steps {
        let qk = q[k];
        let next = qk
            + (model.supply_drift)(qk, t[k]) * dt
            + (model.supply_diffusion)(qk, t[k]) * dw[k];
        q.push(next);
    }
    SupplyPath { q, dw, t, dt }
}
