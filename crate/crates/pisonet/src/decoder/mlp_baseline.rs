//! Ablation baseline: a plain feed-forward map from `(z, theta, t)` to the
//! phase point, with the state output pinned to the latent endpoints through
//! `x_out(t) = y(t) + t(T-t)/T^2 * x'(t)`. Deliberately not symplectic.

use super::net::{mlp_backward, mlp_forward, mlp_tangent, MlpShape};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBaselineConfig {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for MlpBaselineConfig {
    fn default() -> Self {
        MlpBaselineConfig { hidden: 64, depth: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpBaselineWeights {
    pub config: MlpBaselineConfig,
    pub n_agents: usize,
    pub dx: usize,
    pub theta_dim: usize,
    pub data: Vec<f64>,
}

impl MlpBaselineWeights {
    fn shape(&self) -> MlpShape {
        let n2 = 2 * self.n_agents * self.dx;
        MlpShape {
            input: n2 + self.theta_dim + 1,
            hidden: self.config.hidden,
            depth: self.config.depth,
            output: Some(n2),
        }
    }

    pub fn half_dim(&self) -> usize {
        self.n_agents * self.dx
    }
}

pub fn mlp_param_count(cfg: &MlpBaselineConfig, n_agents: usize, dx: usize, theta_dim: usize) -> usize {
    let n2 = 2 * n_agents * dx;
    MlpShape {
        input: n2 + theta_dim + 1,
        hidden: cfg.hidden,
        depth: cfg.depth,
        output: Some(n2),
    }
    .param_count()
}

/// Pick the hidden width whose parameter count comes closest to `target`.
pub fn matched_hidden_width(target: usize, depth: usize, n_agents: usize, dx: usize, theta_dim: usize) -> usize {
    let mut best = (usize::MAX, 1);
    for hidden in 1..=512 {
        let cfg = MlpBaselineConfig { hidden, depth };
        let count = mlp_param_count(&cfg, n_agents, dx, theta_dim);
        let gap = count.abs_diff(target);
        if gap < best.0 {
            best = (gap, hidden);
        }
    }
    best.1
}

pub fn init_mlp_baseline(
    cfg: &MlpBaselineConfig,
    n_agents: usize,
    dx: usize,
    theta_dim: usize,
    seed: u64,
) -> MlpBaselineWeights {
    let mut w = MlpBaselineWeights {
        config: cfg.clone(),
        n_agents,
        dx,
        theta_dim,
        data: Vec::new(),
    };
    let shape = w.shape();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x31ab_cd02);
    let mut data = vec![0.0; shape.param_count()];
    let mut off = 0;
    let mut fan_in = shape.input;
    for _ in 0..shape.depth {
        let s = 1.0 / (fan_in as f64).sqrt();
        for v in &mut data[off..off + shape.hidden * fan_in + shape.hidden] {
            *v = rng.random_range(-s..s);
        }
        off += shape.hidden * fan_in + shape.hidden;
        fan_in = shape.hidden;
    }
    // Zero output layer: the baseline starts as (y, 0), mirroring the
    // identity start of the shear decoder.
    w.data = data;
    w
}

fn beta_tilde(t: f64, horizon: f64) -> f64 {
    t * (horizon - t) / (horizon * horizon)
}

fn beta_tilde_dot(t: f64, horizon: f64) -> f64 {
    (horizon - 2.0 * t) / (horizon * horizon)
}

fn input_vec(_w: &MlpBaselineWeights, theta: &[f64], t: f64, z: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(z.len() + theta.len() + 1);
    input.extend_from_slice(z);
    input.extend_from_slice(theta);
    input.push(t);
    input
}

pub fn mlp_baseline_forward(
    w: &MlpBaselineWeights,
    theta: &[f64],
    t: f64,
    horizon: f64,
    z: &[f64],
) -> Vec<f64> {
    let n = w.half_dim();
    let cache = mlp_forward(&w.shape(), &w.data, &input_vec(w, theta, t, z));
    let raw = cache.output();
    let bt = beta_tilde(t, horizon);
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(z[i] + bt * raw[i]);
    }
    out.extend_from_slice(&raw[n..2 * n]);
    out
}

/// Decoded velocity: JVP along `zdot` plus the explicit time derivative.
pub fn mlp_baseline_velocity(
    w: &MlpBaselineWeights,
    theta: &[f64],
    t: f64,
    horizon: f64,
    z: &[f64],
    zdot: &[f64],
) -> Vec<f64> {
    let n = w.half_dim();
    let shape = w.shape();
    let input = input_vec(w, theta, t, z);
    let cache = mlp_forward(&shape, &w.data, &input);
    let mut ztan = vec![0.0; shape.input];
    ztan[..2 * n].copy_from_slice(zdot);
    let jvp = mlp_tangent(&shape, &w.data, &cache, &ztan);
    let mut ttan = vec![0.0; shape.input];
    ttan[shape.input - 1] = 1.0;
    let tdot = mlp_tangent(&shape, &w.data, &cache, &ttan);
    let raw = cache.output();
    let bt = beta_tilde(t, horizon);
    let btd = beta_tilde_dot(t, horizon);
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(zdot[i] + bt * (jvp.output()[i] + tdot.output()[i]) + btd * raw[i]);
    }
    for i in n..2 * n {
        out.push(jvp.output()[i] + tdot.output()[i]);
    }
    out
}

/// Loss gradient over one collocation point, mirroring the decoder contract:
/// `out_bar` seeds the phase output, `vel_bar` the combined velocity channel.
#[allow(clippy::too_many_arguments)]
pub fn mlp_baseline_point_gradient(
    w: &MlpBaselineWeights,
    theta: &[f64],
    t: f64,
    horizon: f64,
    z: &[f64],
    zdot: &[f64],
    out_bar: &[f64],
    vel_bar: &[f64],
    grad: &mut [f64],
) {
    let n = w.half_dim();
    let shape = w.shape();
    let input = input_vec(w, theta, t, z);
    let cache = mlp_forward(&shape, &w.data, &input);
    let mut ztan = vec![0.0; shape.input];
    ztan[..2 * n].copy_from_slice(zdot);
    let jvp = mlp_tangent(&shape, &w.data, &cache, &ztan);
    let mut ttan = vec![0.0; shape.input];
    ttan[shape.input - 1] = 1.0;
    let tdot = mlp_tangent(&shape, &w.data, &cache, &ttan);

    let bt = beta_tilde(t, horizon);
    let btd = beta_tilde_dot(t, horizon);
    // raw output adjoint: state rows scaled by beta factors, costate raw.
    let mut raw_bar = vec![0.0; 2 * n];
    let mut tan_bar = vec![0.0; 2 * n];
    for i in 0..n {
        raw_bar[i] = bt * out_bar[i] + btd * vel_bar[i];
        raw_bar[n + i] = out_bar[n + i];
        tan_bar[i] = bt * vel_bar[i];
        tan_bar[n + i] = vel_bar[n + i];
    }
    mlp_backward(
        &shape,
        &w.data,
        &cache,
        &raw_bar,
        &[(&jvp, &tan_bar), (&tdot, &tan_bar)],
        grad,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_reproduce_latent_state_with_zero_costate() {
        let cfg = MlpBaselineConfig { hidden: 8, depth: 2 };
        let mut w = init_mlp_baseline(&cfg, 2, 4, 4, 1);
        w.data.iter_mut().for_each(|v| *v = 0.0);
        let z: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let out = mlp_baseline_forward(&w, &[0.1; 4], 0.4, 1.0, &z);
        assert_eq!(&out[..8], &z[..8]);
        assert!(out[8..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn endpoints_pin_state_to_latent() {
        let cfg = MlpBaselineConfig { hidden: 8, depth: 2 };
        let mut w = init_mlp_baseline(&cfg, 2, 4, 4, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for v in &mut w.data {
            *v = rng.random_range(-0.5..0.5);
        }
        let z: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in [0.0, 1.0] {
            let out = mlp_baseline_forward(&w, &[0.1; 4], t, 1.0, &z);
            assert_eq!(&out[..8], &z[..8], "state endpoint at t={t}");
        }
    }

    #[test]
    fn velocity_matches_finite_difference_in_time_of_a_moving_input() {
        let cfg = MlpBaselineConfig { hidden: 6, depth: 2 };
        let mut w = init_mlp_baseline(&cfg, 1, 4, 2, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for v in &mut w.data {
            *v = rng.random_range(-0.5..0.5);
        }
        let theta = [0.3, -0.2];
        // z(t) follows a synthetic smooth path; velocity channel must equal
        // d/dt [ Phi(t, z(t)) ].
        let zpath = |t: f64| -> Vec<f64> {
            (0..8).map(|i| (t * (i as f64 + 1.0)).sin()).collect()
        };
        let zdotpath = |t: f64| -> Vec<f64> {
            (0..8)
                .map(|i| (i as f64 + 1.0) * (t * (i as f64 + 1.0)).cos())
                .collect()
        };
        let t = 0.45;
        let vel = mlp_baseline_velocity(&w, &theta, t, 1.0, &zpath(t), &zdotpath(t));
        let h = 1e-5;
        let fp = mlp_baseline_forward(&w, &theta, t + h, 1.0, &zpath(t + h));
        let fm = mlp_baseline_forward(&w, &theta, t - h, 1.0, &zpath(t - h));
        for i in 0..8 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!(
                (vel[i] - fd).abs() < 1e-8 * (1.0 + fd.abs()),
                "comp {i}: {} vs {fd}",
                vel[i]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = MlpBaselineConfig { hidden: 4, depth: 1 };
        let mut w = init_mlp_baseline(&cfg, 1, 4, 2, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for v in &mut w.data {
            *v = rng.random_range(-0.5..0.5);
        }
        let theta = [0.2, 0.4];
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zd: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ob: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vb: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 0.3;
        let objective = |w: &MlpBaselineWeights| {
            let out = mlp_baseline_forward(w, &theta, t, 1.0, &z);
            let vel = mlp_baseline_velocity(w, &theta, t, 1.0, &z, &zd);
            out.iter().zip(&ob).map(|(v, b)| v * b).sum::<f64>()
                + vel.iter().zip(&vb).map(|(v, b)| v * b).sum::<f64>()
        };
        let mut grad = vec![0.0; w.data.len()];
        mlp_baseline_point_gradient(&w, &theta, t, 1.0, &z, &zd, &ob, &vb, &mut grad);
        let h = 1e-6;
        for idx in 0..w.data.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.data[idx] += h;
            wm.data[idx] -= h;
            let fd = (objective(&wp) - objective(&wm)) / (2.0 * h);
            assert!(
                (grad[idx] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {idx}: {} vs {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn matched_width_search_brackets_target() {
        let target = 25_000;
        let hidden = matched_hidden_width(target, 2, 4, 4, 8);
        let cfg = MlpBaselineConfig { hidden, depth: 2 };
        let count = mlp_param_count(&cfg, 4, 4, 8);
        let rel = (count as f64 - target as f64).abs() / target as f64;
        assert!(rel < 0.1, "matched count {count} vs target {target}");
    }
}
