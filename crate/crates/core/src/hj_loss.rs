//! Path-wise soft Hamilton-Jacobi likelihood.
//!
//! For a logged step `(x, C, t) -> (x', C', t + dt)`:
//!
//! ```text
//! H_HJ = (1/beta) ln sum_k w_k exp(-beta H_k) + r J + (dx/dt - mu0 - mu1 <a>[J]) . J_x
//! R    = J(next) - J(now) - H_HJ dt                     (J(next) = U(C_T) on the last step)
//! dS   = sum_i [mu1 (<a>[J] - <a>_0)]_i / sigma_i^2 [(mu0 + 1/2 mu1 (<a>[J] + <a>_0)) dt - dx]_i
//! loss = mean over steps of 1/2 R^2 + nu^2 dS
//! ```
//!
//! Everything is evaluated at the current point `(x, C, t)`. The parameter
//! gradient is assembled by hand: adjoints of `J`, `J_x`, `J_C` at the current
//! point and of `J` at the next point are pushed through the network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::model::{dot, Dataset, ExtendedState, ModelSpec};
use crate::policy::{tilt, CurvatureGuard, GaussianMixturePolicy, ValueGradients};
use crate::value_net::{network_input, ValueNetwork};

/// Steps per parallel work unit; fixing it makes the reduction order independent
/// of the thread count.
const CHUNK: usize = 16;

/// One transition in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRef {
    pub trajectory: usize,
    pub step: usize,
}

impl StepRef {
    pub fn all(dataset: &Dataset) -> Vec<StepRef> {
        (0..dataset.trajectories.len())
            .flat_map(|trajectory| (0..dataset.n_steps).map(move |step| StepRef { trajectory, step }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Mean of `1/2 R^2`.
    pub hj_term: f64,
    /// Mean of `nu^2 dS`.
    pub delta_s_term: f64,
    pub clamp_events: usize,
    pub n_steps: usize,
}

impl LossReport {
    fn add(&mut self, other: &LossReport) {
        self.loss += other.loss;
        self.hj_term += other.hj_term;
        self.delta_s_term += other.delta_s_term;
        self.clamp_events += other.clamp_events;
        self.n_steps += other.n_steps;
    }

    fn scaled(mut self, factor: f64) -> Self {
        self.loss *= factor;
        self.hj_term *= factor;
        self.delta_s_term *= factor;
        self
    }
}

/// Per-step quantities and, optionally, their adjoints.
#[derive(Debug, Clone)]
pub(crate) struct StepEval {
    pub residual: f64,
    pub delta_s: f64,
    pub hamiltonian: f64,
    pub clamped: usize,
    pub adjoint: Option<StepAdjoint>,
}

/// Partial derivatives of `1/2 R^2 + nu^2 dS`.
#[derive(Debug, Clone)]
pub(crate) struct StepAdjoint {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_c: f64,
    pub next_value: f64,
}

struct Shared<'a> {
    spec: &'a ModelSpec,
    policy: &'a GaussianMixturePolicy,
    nu_sq: f64,
}

fn evaluate_step(
    ctx: &Shared,
    vg: &ValueGradients,
    x: &[f64],
    x_next: &[f64],
    next_value: f64,
    dt: f64,
    with_adjoint: bool,
) -> StepEval {
    let spec = ctx.spec;
    let n = spec.state_dim;
    let beta = spec.beta();
    let mu0 = spec.base_drift(x);
    let mu1 = spec.control_matrix(x);
    let c1x = spec.action_cost_weight(x);
    let prior = ctx.policy.at(x);
    let t = tilt(&prior, c1x, vg.grad_c, &vg.projected, beta, CurvatureGuard::Clamp)
        .expect("clamped tilt cannot fail");
    let a_opt = t.mean_action();
    let a_base = prior.mean();

    let drift_gap: Vec<f64> = (0..n).map(|i| (x_next[i] - x[i]) / dt - mu0[i]).collect();
    let hamiltonian =
        t.log_partition + spec.discount_rate * vg.value + dot(&drift_gap, &vg.grad_x) - dot(&a_opt, &vg.projected);
    let residual = next_value - vg.value - hamiltonian * dt;

    let diff: Vec<f64> = a_opt.iter().zip(&a_base).map(|(a, b)| a - b).collect();
    let sum: Vec<f64> = a_opt.iter().zip(&a_base).map(|(a, b)| a + b).collect();
    let push_diff = mu1.mul_vec(&diff);
    let push_sum = mu1.mul_vec(&sum);
    let inv_var: Vec<f64> = spec.volatility.iter().map(|s| 1.0 / (s * s)).collect();
    let gap: Vec<f64> = (0..n)
        .map(|i| (mu0[i] + 0.5 * push_sum[i]) * dt - (x_next[i] - x[i]))
        .collect();
    let delta_s: f64 = (0..n).map(|i| push_diff[i] * inv_var[i] * gap[i]).sum();

    let adjoint = with_adjoint.then(|| {
        let m_dim = spec.action_dim;
        let r_adj = residual;
        let h_adj = -dt * r_adj;
        let value_adj = -r_adj + spec.discount_rate * h_adj;
        let mut gx_adj: Vec<f64> = drift_gap.iter().map(|w| h_adj * w).collect();
        let lse_adj = h_adj;
        let mut m_adj: Vec<f64> = a_opt.iter().map(|a| -h_adj * a).collect();
        let mut a_adj: Vec<f64> = vg.projected.iter().map(|m| -h_adj * m).collect();

        let q: Vec<f64> = (0..n).map(|i| gap[i] * inv_var[i]).collect();
        let p: Vec<f64> = (0..n).map(|i| push_diff[i] * inv_var[i]).collect();
        let from_q = mu1.tr_mul_vec(&q);
        let from_p = mu1.tr_mul_vec(&p);
        for j in 0..m_dim {
            a_adj[j] += ctx.nu_sq * (from_q[j] + 0.5 * dt * from_p[j]);
        }

        // dH_k/dJ_C
        let m_sq: f64 = vg.projected.iter().map(|v| v * v).sum();
        let dh_dgc: Vec<f64> = (0..t.weights.len())
            .map(|k| {
                let s = prior.variances[k];
                let d = t.denom[k];
                let u = &prior.means[k];
                let u_sq: f64 = u.iter().map(|v| v * v).sum();
                if t.clamped[k] {
                    0.5 * c1x * u_sq / d
                } else {
                    let numer = c1x * vg.grad_c * u_sq + 2.0 * dot(u, &vg.projected) - beta * s * m_sq;
                    c1x * (0.5 * u_sq / d - 0.5 * beta * s * numer / (d * d) + 0.5 * m_dim as f64 * s / d)
                }
            })
            .collect();

        let mut gc_adj = 0.0;
        for (k, &w) in t.weights.iter().enumerate() {
            gc_adj -= lse_adj * w * dh_dgc[k];
        }
        for (ma, a) in m_adj.iter_mut().zip(&a_opt) {
            *ma -= lse_adj * a;
        }

        let w_hat: Vec<f64> = t.means.iter().map(|u| dot(u, &a_adj)).collect();
        let w_bar: f64 = t.weights.iter().zip(&w_hat).map(|(w, h)| w * h).sum();
        for k in 0..t.weights.len() {
            let w = t.weights[k];
            let s = prior.variances[k];
            let d = t.denom[k];
            // through the shifted mean
            let shrink = beta * s / d;
            for j in 0..m_dim {
                m_adj[j] -= shrink * w * a_adj[j];
            }
            if !t.clamped[k] {
                gc_adj -= shrink * c1x * w * w_hat[k];
            }
            // through the reweighting
            let h_k_adj = -beta * w * (w_hat[k] - w_bar);
            for j in 0..m_dim {
                m_adj[j] += h_k_adj * t.means[k][j];
            }
            gc_adj += h_k_adj * dh_dgc[k];
        }

        let from_m = mu1.mul_vec(&m_adj);
        for (g, v) in gx_adj.iter_mut().zip(from_m) {
            *g += v;
        }
        StepAdjoint {
            value: value_adj,
            grad_x: gx_adj,
            grad_c: gc_adj,
            next_value: r_adj,
        }
    });

    StepEval {
        residual,
        delta_s,
        hamiltonian,
        clamped: t.n_clamped(),
        adjoint,
    }
}

/// `H_HJ` at `(x, C, t)` with the observed increment `delta_x`.
pub fn hj_hamiltonian(
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    vg: &ValueGradients,
    x: &[f64],
    delta_x: &[f64],
    dt: f64,
) -> Result<f64> {
    check_dim("state", spec.state_dim, x.len())?;
    check_dim("state increment", spec.state_dim, delta_x.len())?;
    let x_next: Vec<f64> = x.iter().zip(delta_x).map(|(a, b)| a + b).collect();
    let ctx = Shared {
        spec,
        policy: policy0,
        nu_sq: 0.0,
    };
    Ok(evaluate_step(&ctx, vg, x, &x_next, 0.0, dt, false).hamiltonian)
}

/// Action mismatch `dS` between the posterior and behavioral mean drifts.
pub fn delta_s(
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    vg: &ValueGradients,
    x: &[f64],
    x_next: &[f64],
    dt: f64,
) -> Result<f64> {
    check_dim("state", spec.state_dim, x.len())?;
    check_dim("next state", spec.state_dim, x_next.len())?;
    let ctx = Shared {
        spec,
        policy: policy0,
        nu_sq: 0.0,
    };
    Ok(evaluate_step(&ctx, vg, x, x_next, 0.0, dt, false).delta_s)
}

/// `J(next) - J(now) - H_HJ dt`, with `U(C_T)` in place of `J(next)` on the last step.
pub fn step_residual(
    net: &ValueNetwork,
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    now: &ExtendedState,
    next: &ExtendedState,
    is_terminal_step: bool,
) -> Result<f64> {
    let vg = net.input_gradients(spec, now)?;
    let next_value = if is_terminal_step {
        spec.terminal_utility(next.cost)
    } else {
        net.eval(&next.x, next.cost, next.t)?
    };
    let ctx = Shared {
        spec,
        policy: policy0,
        nu_sq: 0.0,
    };
    let dt = next.t - now.t;
    Ok(evaluate_step(&ctx, &vg, &now.x, &next.x, next_value, dt, false).residual)
}

fn check_batch(dataset: &Dataset, spec: &ModelSpec, batch: &[StepRef]) -> Result<()> {
    check_dim("dataset state_dim", spec.state_dim, dataset.state_dim)?;
    for s in batch {
        if s.trajectory >= dataset.trajectories.len() || s.step >= dataset.n_steps {
            return Err(crate::error::Error::invalid(
                "batch",
                format!("step {s:?} outside the dataset"),
            ));
        }
    }
    Ok(())
}

fn chunk_pass(
    net: &ValueNetwork,
    ctx: &Shared,
    dataset: &Dataset,
    steps: &[StepRef],
    grad: Option<&mut [f64]>,
) -> LossReport {
    let spec = ctx.spec;
    let n = spec.state_dim;
    let last = dataset.n_steps - 1;
    let mut report = LossReport::default();
    let mut grad = grad;
    for s in steps {
        let tr = &dataset.trajectories[s.trajectory];
        let (x, x_next) = (&tr.states[s.step], &tr.states[s.step + 1]);
        let dt = tr.times[s.step + 1] - tr.times[s.step];
        let input = network_input(x, tr.costs[s.step], tr.times[s.step]);
        let tape = net.tape(&input, true);
        let g = tape.input_gradient();
        let vg = ValueGradients::new(spec, x, tape.value(), g[..n].to_vec(), g[n]);
        let terminal = s.step == last;
        let next_tape = (!terminal).then(|| {
            net.tape(
                &network_input(x_next, tr.costs[s.step + 1], tr.times[s.step + 1]),
                false,
            )
        });
        let next_value = match &next_tape {
            Some(t) => t.value(),
            None => spec.terminal_utility(tr.costs[s.step + 1]),
        };
        let ev = evaluate_step(ctx, &vg, x, x_next, next_value, dt, grad.is_some());
        let hj = 0.5 * ev.residual * ev.residual;
        let ds = ctx.nu_sq * ev.delta_s;
        report.add(&LossReport {
            loss: hj + ds,
            hj_term: hj,
            delta_s_term: ds,
            clamp_events: ev.clamped,
            n_steps: 1,
        });
        if let (Some(out), Some(adj)) = (grad.as_deref_mut(), ev.adjoint) {
            let mut g_adj = adj.grad_x;
            g_adj.push(adj.grad_c);
            g_adj.push(0.0);
            net.accumulate_parameter_gradient(&tape, adj.value, Some(&g_adj), out);
            if let Some(nt) = &next_tape {
                net.accumulate_parameter_gradient(nt, adj.next_value, None, out);
            }
        }
    }
    report
}

/// Mean loss over `batch` and its per-term decomposition.
pub fn nll_loss(
    net: &ValueNetwork,
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    dataset: &Dataset,
    batch: &[StepRef],
    nu_sq: f64,
) -> Result<LossReport> {
    check_batch(dataset, spec, batch)?;
    let ctx = Shared {
        spec,
        policy: policy0,
        nu_sq,
    };
    let parts: Vec<LossReport> = batch
        .par_chunks(CHUNK)
        .map(|c| chunk_pass(net, &ctx, dataset, c, None))
        .collect();
    Ok(reduce(parts, batch.len()))
}

/// Mean loss over `batch` and its gradient with respect to the network parameters.
pub fn nll_loss_and_gradient(
    net: &ValueNetwork,
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    dataset: &Dataset,
    batch: &[StepRef],
    nu_sq: f64,
) -> Result<(LossReport, Vec<f64>)> {
    check_batch(dataset, spec, batch)?;
    let ctx = Shared {
        spec,
        policy: policy0,
        nu_sq,
    };
    let n_params = net.n_params();
    let parts: Vec<(LossReport, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|c| {
            let mut g = vec![0.0; n_params];
            let r = chunk_pass(net, &ctx, dataset, c, Some(&mut g));
            (r, g)
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    let mut reports = Vec::with_capacity(parts.len());
    for (r, g) in parts {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        reports.push(r);
    }
    let scale = if batch.is_empty() { 0.0 } else { 1.0 / batch.len() as f64 };
    for v in &mut grad {
        *v *= scale;
    }
    Ok((reduce(reports, batch.len()), grad))
}

fn reduce(parts: Vec<LossReport>, n: usize) -> LossReport {
    let mut total = LossReport::default();
    for p in &parts {
        total.add(p);
    }
    if n == 0 {
        return total;
    }
    total.scaled(1.0 / n as f64)
}
