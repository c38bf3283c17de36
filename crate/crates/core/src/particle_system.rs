//! Discrete particle dynamics, the adversarial loss, and adjoint
//! reconstruction: the bridge between the networks and the game.
//!
//! States advance by explicit Euler under the control network's outputs,
//! `X[k+1] = X[k] + v[k] dt`. Both networks emit K+1 values; the dynamics
//! only consumes controls up to K-1, but the terminal control is kept so the
//! adjoint and the balance residual are defined on the whole grid.

use std::io::{self, Write};

use crate::diffgraph::{NodeId, Tape};
use crate::market_model::{MarketModel, SupplyPath};
use crate::matrix::Matrix;
use crate::rnn_policy::{unroll_price, ControlUnroll, RnnParams, TapeNet};

/// Node handles for one rolled trajectory bundle on a tape.
pub struct RolledPaths {
    /// K+1 nodes of shape (1 x N): agent positions per step.
    pub states: Vec<NodeId>,
    /// K+1 nodes of shape (1 x N): controls per step.
    pub controls: Vec<NodeId>,
    /// K+1 nodes of shape (1 x 1): the price sequence.
    pub price: Vec<NodeId>,
}

/// One supply realization with the trajectories it induced, as plain values.
#[derive(Clone, Debug)]
pub struct SamplePath {
    pub supply: SupplyPath,
    /// Price per step, length K+1.
    pub price: Vec<f64>,
    /// `states[n][k]`: agent n's position at step k; N x (K+1).
    pub states: Vec<Vec<f64>>,
    /// `controls[n][k]`: agent n's trading rate at step k; N x (K+1).
    pub controls: Vec<Vec<f64>>,
    /// `adjoints[n][k]`; empty until [`reconstruct_adjoint`] runs.
    pub adjoints: Vec<Vec<f64>>,
}

impl SamplePath {
    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    pub fn steps(&self) -> usize {
        self.supply.steps()
    }

    pub fn has_adjoints(&self) -> bool {
        !self.adjoints.is_empty()
    }
}

/// Monte-Carlo batch: one [`SamplePath`] per supply realization.
#[derive(Clone, Debug, Default)]
pub struct ParticleBatch {
    pub samples: Vec<SamplePath>,
}

impl ParticleBatch {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_agents(&self) -> usize {
        self.samples.first().map_or(0, SamplePath::n_agents)
    }

    pub fn steps(&self) -> usize {
        self.samples.first().map_or(0, SamplePath::steps)
    }
}

/// Unroll both networks on a tape: the price from the supply path, the
/// controls interleaved with Euler state updates.
pub fn roll_dynamics(
    tape: &mut Tape,
    ctrl_net: &TapeNet,
    price_net: &TapeNet,
    x0: &[f64],
    supply: &SupplyPath,
) -> RolledPaths {
    let price = unroll_price(tape, price_net, supply);
    let k_steps = supply.steps();
    let mut unroll = ControlUnroll::new(tape, ctrl_net, x0.len());
    let mut states = Vec::with_capacity(k_steps + 1);
    let mut controls = Vec::with_capacity(k_steps + 1);
    states.push(tape.leaf(Matrix::row_from(x0)));
    for k in 0..=k_steps {
        let v = unroll.step(tape, ctrl_net, supply.t[k], states[k], price[k]);
        controls.push(v);
        if k < k_steps {
            let dv = tape.scale(v, supply.dt);
            let next = tape.add(states[k], dv);
            states.push(next);
        }
    }
    RolledPaths {
        states,
        controls,
        price,
    }
}

/// Roll one sample to plain values (throwaway tape; no gradients kept).
pub fn roll_sample(
    ctrl: &RnnParams,
    price: &RnnParams,
    x0: &[f64],
    supply: &SupplyPath,
) -> SamplePath {
    let mut tape = Tape::new();
    let cn = TapeNet::register(&mut tape, ctrl);
    let pn = TapeNet::register(&mut tape, price);
    let rolled = roll_dynamics(&mut tape, &cn, &pn, x0, supply);
    extract_sample(&tape, &rolled, supply)
}

/// Copy a rolled bundle's values off the tape.
pub fn extract_sample(tape: &Tape, rolled: &RolledPaths, supply: &SupplyPath) -> SamplePath {
    let n = tape.value(rolled.states[0]).cols();
    let k_steps = supply.steps();
    let mut states = vec![vec![0.0; k_steps + 1]; n];
    let mut controls = vec![vec![0.0; k_steps + 1]; n];
    for k in 0..=k_steps {
        let xs = tape.value(rolled.states[k]);
        let vs = tape.value(rolled.controls[k]);
        for a in 0..n {
            states[a][k] = xs.get(0, a);
            controls[a][k] = vs.get(0, a);
        }
    }
    let price = rolled
        .price
        .iter()
        .map(|&p| tape.value(p).as_scalar())
        .collect();
    SamplePath {
        supply: supply.clone(),
        price,
        states,
        controls,
        adjoints: Vec::new(),
    }
}

/// The saddle-point objective for one supply realization:
/// `(1/N) sum_n [ sum_{k<K} dt (L(X, v) + price_k (v - Q_k)) + u_T(X_K) ]`,
/// built on the tape so gradients exist for both parameter sets.
pub fn adversarial_loss(
    tape: &mut Tape,
    model: &MarketModel,
    rolled: &RolledPaths,
    supply: &SupplyPath,
) -> NodeId {
    let k_steps = supply.steps();
    let mut acc: Option<NodeId> = None;
    for k in 0..k_steps {
        let cost = tape.pair_map(
            rolled.states[k],
            rolled.controls[k],
            &model.lagrangian,
            &model.lagrangian_dx,
            &model.lagrangian_dv,
        );
        let v_minus_q = tape.shift(rolled.controls[k], -supply.q[k]);
        let clearing = tape.scalar_mul(rolled.price[k], v_minus_q);
        let step_term = tape.add(cost, clearing);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, step_term),
            None => step_term,
        });
    }
    let running = tape.scale(acc.expect("at least one time step"), supply.dt);
    let terminal = tape.map(
        rolled.states[k_steps],
        &model.terminal_cost,
        &model.terminal_cost_dx,
    );
    let per_agent = tape.add(running, terminal);
    tape.mean(per_agent)
}

/// Fill `sample.adjoints` from the optimality relation
/// `P = -L_v(X, v) - price`, applied on the whole grid (the terminal control
/// comes from the network's k = K output).
pub fn reconstruct_adjoint(model: &MarketModel, sample: &mut SamplePath) {
    let k_steps = sample.steps();
    let n = sample.n_agents();
    let mut adjoints = vec![vec![0.0; k_steps + 1]; n];
    for a in 0..n {
        for k in 0..=k_steps {
            let x = sample.states[a][k];
            let v = sample.controls[a][k];
            adjoints[a][k] = -(model.lagrangian_dv)(x, v) - sample.price[k];
        }
    }
    sample.adjoints = adjoints;
}

/// Apply [`reconstruct_adjoint`] to every sample of a batch.
pub fn reconstruct_adjoint_batch(model: &MarketModel, batch: &mut ParticleBatch) {
    for sample in &mut batch.samples {
        reconstruct_adjoint(model, sample);
    }
}

/// Trajectory dump, one row per (sample, agent, step).
pub fn write_trajectories_csv<W: Write>(
    out: &mut W,
    run_id: &str,
    batch: &ParticleBatch,
) -> io::Result<()> {
    writeln!(out, "run_id,sample_j,agent_n,k,t,X,v,P,price,Q")?;
    for (j, sample) in batch.samples.iter().enumerate() {
        for a in 0..sample.n_agents() {
            for k in 0..=sample.steps() {
                let p = if sample.has_adjoints() {
                    sample.adjoints[a][k]
                } else {
                    f64::NAN
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    run_id,
                    j,
                    a,
                    k,
                    sample.supply.t[k],
                    sample.states[a][k],
                    sample.controls[a][k],
                    p,
                    sample.price[k],
                    sample.supply.q[k],
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::grad_check;
    use crate::market_model::{lq_model, simulate_supply};
    use crate::rng::{RngStreams, StreamKind};
    use crate::rnn_policy::{
        init_control_params, init_params, init_price_params, NetworkTag,
    };
    use std::sync::Arc;

    fn paper_lq() -> MarketModel {
        lq_model(1.0, 1.0, 1.0 / std::f64::consts::E)
    }

    fn zero_supply_model() -> MarketModel {
        paper_lq()
            .with_supply(Arc::new(|_, _| 0.0), Arc::new(|_, _| 0.0))
            .with_initial_supply(0.0)
    }

    fn zeroed(mut params: RnnParams) -> RnnParams {
        for w in &mut params.weights {
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        for b in &mut params.biases {
            *b = Matrix::zeros(b.rows(), b.cols());
        }
        params.recurrent = Matrix::zeros(params.recurrent.rows(), params.recurrent.cols());
        params
    }

    /// Zero network with a constant output, via the output-layer bias.
    fn constant_output(mut params: RnnParams, value: f64) -> RnnParams {
        params = zeroed(params);
        params.biases.last_mut().unwrap().set(0, 0, value);
        params
    }

    #[test]
    fn zero_controls_leave_states_constant() {
        let model = zero_supply_model();
        let streams = RngStreams::new(1);
        let supply = simulate_supply(&model, 40, &mut streams.stream(StreamKind::Supply));
        let ctrl = zeroed(init_control_params(&mut streams.stream(StreamKind::Init)));
        let price = zeroed(init_price_params(&mut streams.stream(StreamKind::Init)));

        let x0 = [0.4, -1.5, 0.0];
        let sample = roll_sample(&ctrl, &price, &x0, &supply);
        assert_eq!(sample.states[0].len(), 41);
        for (a, &start) in x0.iter().enumerate() {
            assert!(sample.states[a].iter().all(|&x| x == start));
            assert!(sample.controls[a].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_euler_step() {
        let model = zero_supply_model();
        let streams = RngStreams::new(1);
        let supply = simulate_supply(&model, 40, &mut streams.stream(StreamKind::Supply));
        assert_eq!(supply.dt, 0.025);
        let ctrl = constant_output(init_control_params(&mut streams.stream(StreamKind::Init)), 1.0);
        let price = zeroed(init_price_params(&mut streams.stream(StreamKind::Init)));

        let sample = roll_sample(&ctrl, &price, &[0.0], &supply);
        assert_eq!(sample.states[0][1], 0.025);
    }

    /// Euler is exact for constant controls: X_K = x0 + v T. A power-of-two
    /// step count keeps the arithmetic exact.
    #[test]
    fn euler_exact_for_constant_controls() {
        let model = zero_supply_model();
        let streams = RngStreams::new(1);
        let supply = simulate_supply(&model, 32, &mut streams.stream(StreamKind::Supply));
        let v = 0.75;
        let ctrl = constant_output(init_control_params(&mut streams.stream(StreamKind::Init)), v);
        let price = zeroed(init_price_params(&mut streams.stream(StreamKind::Init)));

        let x0 = 0.5;
        let sample = roll_sample(&ctrl, &price, &[x0], &supply);
        assert_eq!(sample.states[0][32], x0 + v * 1.0);
    }

    /// Frozen oracle for the loss example: zero controls, zero price, zero
    /// supply, x0 = 0 gives K dt L(0,0) + u_T(0) = 0.5 + 1/(2e).
    #[test]
    fn loss_on_degenerate_instance() {
        let model = zero_supply_model();
        let streams = RngStreams::new(1);
        let supply = simulate_supply(&model, 40, &mut streams.stream(StreamKind::Supply));
        let ctrl = zeroed(init_control_params(&mut streams.stream(StreamKind::Init)));
        let price = zeroed(init_price_params(&mut streams.stream(StreamKind::Init)));

        let mut tape = Tape::new();
        let cn = TapeNet::register(&mut tape, &ctrl);
        let pn = TapeNet::register(&mut tape, &price);
        let rolled = roll_dynamics(&mut tape, &cn, &pn, &[0.0], &supply);
        let loss = adversarial_loss(&mut tape, &model, &rolled, &supply);

        let expected = 0.5 + 0.5 / std::f64::consts::E;
        assert!((tape.value(loss).as_scalar() - expected).abs() < 1e-12);
    }

    /// The multiplier term vanishes when market clearing holds exactly, so
    /// the loss does not depend on the price and the price-network gradient
    /// is exactly zero.
    #[test]
    fn cleared_market_decouples_price() {
        let model = paper_lq();
        let streams = RngStreams::new(3);
        // Constant supply Q = 1 with no noise; controls (0, 2) average to 1.
        let flat = paper_lq()
            .with_supply(Arc::new(|_, _| 0.0), Arc::new(|_, _| 0.0))
            .with_initial_supply(1.0);
        let supply = simulate_supply(&flat, 8, &mut streams.stream(StreamKind::Supply));
        assert!(supply.q.iter().all(|&q| q == 1.0));

        let price_params = init_price_params(&mut streams.stream(StreamKind::Init));

        let build = |price_params: &RnnParams| {
            let mut tape = Tape::new();
            let pn = TapeNet::register(&mut tape, price_params);
            let price_nodes = unroll_price(&mut tape, &pn, &supply);
            // Hand-built controls: leaves, not network outputs.
            let mut states = vec![tape.leaf(Matrix::row_from(&[0.0, 0.0]))];
            let mut controls = Vec::new();
            for k in 0..=supply.steps() {
                let v = tape.leaf(Matrix::row_from(&[0.0, 2.0]));
                controls.push(v);
                if k < supply.steps() {
                    let dv = tape.scale(v, supply.dt);
                    let next = tape.add(states[k], dv);
                    states.push(next);
                }
            }
            let rolled = RolledPaths {
                states,
                controls,
                price: price_nodes,
            };
            let loss = adversarial_loss(&mut tape, &model, &rolled, &supply);
            let grads = tape.backward(loss);
            let flat = pn.gradient_flat(&tape, &grads);
            (tape.value(loss).as_scalar(), flat)
        };

        let (loss_a, grad) = build(&price_params);
        assert!(grad.iter().all(|&g| g == 0.0), "price gradient must vanish");

        // A different price network yields the identical loss value.
        let other = init_price_params(&mut streams.indexed_stream(StreamKind::Init, 9));
        let (loss_b, _) = build(&other);
        assert_eq!(loss_a, loss_b);
    }

    #[test]
    fn loss_invariant_under_agent_permutation() {
        let model = paper_lq();
        let streams = RngStreams::new(5);
        let supply = simulate_supply(&model, 10, &mut streams.stream(StreamKind::Supply));
        let ctrl = init_control_params(&mut streams.stream(StreamKind::Init));
        let price = init_price_params(&mut streams.stream(StreamKind::Init));

        let eval = |x0: &[f64]| {
            let mut tape = Tape::new();
            let cn = TapeNet::register(&mut tape, &ctrl);
            let pn = TapeNet::register(&mut tape, &price);
            let rolled = roll_dynamics(&mut tape, &cn, &pn, x0, &supply);
            let loss = adversarial_loss(&mut tape, &model, &rolled, &supply);
            tape.value(loss).as_scalar()
        };
        let a = eval(&[-0.4, 0.1, 0.3, -0.2]);
        let b = eval(&[0.3, -0.2, -0.4, 0.1]);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn adjoint_relation_for_lq() {
        let model = paper_lq();
        let streams = RngStreams::new(7);
        let supply = simulate_supply(&model, 16, &mut streams.stream(StreamKind::Supply));
        let ctrl = init_control_params(&mut streams.stream(StreamKind::Init));
        let price = init_price_params(&mut streams.stream(StreamKind::Init));
        let mut sample = roll_sample(&ctrl, &price, &[0.2, -0.3], &supply);
        assert!(!sample.has_adjoints());
        reconstruct_adjoint(&model, &mut sample);
        assert!(sample.has_adjoints());
        // LQ: L_v = v, so P = -v - price.
        for a in 0..2 {
            for k in 0..=16 {
                let expected = -sample.controls[a][k] - sample.price[k];
                assert_eq!(sample.adjoints[a][k], expected);
            }
        }
    }

    #[test]
    fn zero_controls_and_price_give_zero_adjoint() {
        let model = zero_supply_model();
        let streams = RngStreams::new(1);
        let supply = simulate_supply(&model, 8, &mut streams.stream(StreamKind::Supply));
        let ctrl = zeroed(init_control_params(&mut streams.stream(StreamKind::Init)));
        let price = zeroed(init_price_params(&mut streams.stream(StreamKind::Init)));
        let mut sample = roll_sample(&ctrl, &price, &[0.0, 1.0], &supply);
        reconstruct_adjoint(&model, &mut sample);
        for row in &sample.adjoints {
            assert!(row.iter().all(|&p| p == 0.0));
        }
    }

    /// Full adversarial loss gradients against central finite differences on
    /// a small instance (N = 2, K = 5), for both networks at once.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let model = paper_lq();
        let streams = RngStreams::new(11);
        let supply = simulate_supply(&model, 5, &mut streams.stream(StreamKind::Supply));
        let mut rng = streams.stream(StreamKind::Init);
        let ctrl = init_params(NetworkTag::Control, &[4, 4, 4, 4, 1], 3, &mut rng);
        let price = init_params(NetworkTag::Price, &[4, 4, 4, 4, 1], 2, &mut rng);
        let x0 = [-0.1, 0.35];

        let mut mats = ctrl.ordered_matrices();
        mats.extend(price.ordered_matrices());

        let err = grad_check(
            |tape, ids| {
                let cn = TapeNet::from_ordered_ids(&ids[0..11], 4, 3);
                let pn = TapeNet::from_ordered_ids(&ids[11..22], 4, 2);
                let rolled = roll_dynamics(tape, &cn, &pn, &x0, &supply);
                adversarial_loss(tape, &model, &rolled, &supply)
            },
            &mats,
            1e-6,
        );
        assert!(err <= 1e-5, "gradient error {err}");
    }

    #[test]
    fn trajectory_csv_shape() {
        let model = paper_lq();
        let streams = RngStreams::new(2);
        let supply = simulate_supply(&model, 4, &mut streams.stream(StreamKind::Supply));
        let ctrl = init_control_params(&mut streams.stream(StreamKind::Init));
        let price = init_price_params(&mut streams.stream(StreamKind::Init));
        let mut sample = roll_sample(&ctrl, &price, &[0.0, 0.5], &supply);
        reconstruct_adjoint(&model, &mut sample);
        let batch = ParticleBatch {
            samples: vec![sample],
        };
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, "test-run", &batch).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,sample_j,agent_n,k,t,X,v,P,price,Q");
        // 1 sample x 2 agents x 5 steps + header
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert!(lines[1].starts_with("test-run,0,0,0,"));
    }
}
