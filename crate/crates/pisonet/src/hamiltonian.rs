//! The physical problem family: drag dynamics, smooth barrier relaxation of
//! collision/obstacle constraints, the Pontryagin Hamiltonian and its exact
//! gradients, and optimal-control recovery from the costate.
//!
//! Everything is generic over [`Real`] so that instantiating with [`Dual`]
//! yields exact Hessian-vector products of the Hamiltonian, which the training
//! loss backward pass needs.

use crate::geometry::obstacle_distance;
use crate::phase::ProblemInstance;
use crate::scalar::{Dual, Real};

pub use crate::phase::CostSpec;

/// Regularization of the drag speed factor so the gradient exists at v = 0.
pub const DRAG_DELTA: f64 = 1e-8;

/// Smooth barrier parameters: `eps` is the inverse penalty weight, `ell` the
/// smoothing length. Both anneal toward zero during continuation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BarrierParams {
    pub eps: f64,
    pub ell: f64,
}

impl BarrierParams {
    pub fn new(eps: f64, ell: f64) -> Self {
        assert!(eps > 0.0 && ell > 0.0, "barrier parameters must be positive");
        BarrierParams { eps, ell }
    }
}

#[inline]
fn regularized_speed<R: Real>(v: &[R]) -> R {
    let mut s = R::from_f64(DRAG_DELTA * DRAG_DELTA);
    for x in v {
        s = s + *x * *x;
    }
    s.sqrt()
}

/// Drift `f_i(x_i) = (v_i, -k_i v_i |v_i|)` with the regularized speed.
pub fn dynamics_drift_generic<R: Real>(drag_coeff: f64, x_i: &[R]) -> Vec<R> {
    let du = x_i.len() / 2;
    let v = &x_i[du..];
    let speed = regularized_speed(v);
    let mut out = Vec::with_capacity(x_i.len());
    out.extend_from_slice(v);
    for vi in v {
        out.push(-(*vi * speed).scale(drag_coeff));
    }
    out
}

pub fn dynamics_drift(inst: &ProblemInstance, agent: usize, x_i: &[f64]) -> Vec<f64> {
    dynamics_drift_generic(inst.agents[agent].drag_coeff, x_i)
}

/// Constraint vector in fixed order: pairwise separations for i < j, then
/// per-agent obstacle clearances (agent-major). `h > 0` everywhere means
/// strictly feasible. `positions` is agent-major, `n_agents * spatial_dim`.
pub fn constraint_values_generic<R: Real>(inst: &ProblemInstance, positions: &[R]) -> Vec<R> {
    let n = inst.n_agents();
    let du = inst.dx() / 2;
    let mut h = Vec::with_capacity(n * (n - 1) / 2 + n * inst.env.obstacles.len());
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = R::zero();
            for c in 0..du {
                let d = positions[i * du + c] - positions[j * du + c];
                s = s + d * d;
            }
            h.push(s.sqrt() - R::from_f64(inst.agents[i].radius + inst.agents[j].radius));
        }
    }
    for i in 0..n {
        let w = &positions[i * du..(i + 1) * du];
        for ob in &inst.env.obstacles {
            h.push(obstacle_distance(w, ob) - R::from_f64(inst.agents[i].radius));
        }
    }
    h
}

pub fn constraint_values(inst: &ProblemInstance, positions: &[f64]) -> Vec<f64> {
    constraint_values_generic(inst, positions)
}

/// Overflow-safe softplus `log(1 + e^x)`.
#[inline]
fn softplus<R: Real>(x: R) -> R {
    if x.val() > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Overflow-safe logistic `1 / (1 + e^-x)`.
#[inline]
fn logistic<R: Real>(x: R) -> R {
    let one = R::from_f64(1.0);
    if x.val() > 0.0 {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `U_{eps,ell}(h) = (1/eps) * sum_k ell * log(1 + exp(-h_k/ell))`.
pub fn barrier_generic<R: Real>(h: &[R], bp: &BarrierParams) -> R {
    let mut total = R::zero();
    for hk in h {
        total = total + softplus(hk.scale(-1.0 / bp.ell));
    }
    total.scale(bp.ell / bp.eps)
}

pub fn barrier(h: &[f64], bp: &BarrierParams) -> f64 {
    barrier_generic(h, bp)
}

/// `dU/dh_k = -(1/eps) * logistic(-h_k/ell)`.
#[inline]
fn barrier_slope<R: Real>(hk: R, bp: &BarrierParams) -> R {
    logistic(hk.scale(-1.0 / bp.ell)).scale(-1.0 / bp.eps)
}

/// Unique maximizer of `<p, Bu> - c_u |u|^2`: the velocity block of the
/// costate divided by `2 c_u`.
pub fn conjugate_control(inst: &ProblemInstance, agent: usize, p_i: &[f64]) -> Vec<f64> {
    let du = inst.agents[agent].control_dim;
    let scale = 1.0 / (2.0 * inst.cost.control_weight);
    p_i[du..].iter().map(|pv| pv * scale).collect()
}

/// Pontryagin Hamiltonian of the instance at a full phase point (`x`, `p`
/// agent-major flat, length `N * dx` each).
pub fn hamiltonian_value_generic<R: Real>(
    inst: &ProblemInstance,
    x: &[R],
    p: &[R],
    bp: &BarrierParams,
) -> R {
    let n = inst.n_agents();
    let dx = inst.dx();
    let du = dx / 2;
    let c_v = inst.cost.velocity_weight;
    let c_u = inst.cost.control_weight;
    let mut total = R::zero();
    let mut positions = Vec::with_capacity(n * du);
    for i in 0..n {
        let xi = &x[i * dx..(i + 1) * dx];
        let pi = &p[i * dx..(i + 1) * dx];
        let (w, v) = xi.split_at(du);
        let (pw, pv) = pi.split_at(du);
        positions.extend_from_slice(w);
        let speed = regularized_speed(v);
        let mut transport = R::zero();
        let mut pv_dot_v = R::zero();
        let mut v2 = R::zero();
        let mut pv2 = R::zero();
        for c in 0..du {
            transport = transport + pw[c] * v[c];
            pv_dot_v = pv_dot_v + pv[c] * v[c];
            v2 = v2 + v[c] * v[c];
            pv2 = pv2 + pv[c] * pv[c];
        }
        total = total + transport
            - (speed * pv_dot_v).scale(inst.agents[i].drag_coeff)
            - v2.scale(c_v)
            + pv2.scale(1.0 / (4.0 * c_u));
    }
    let h = constraint_values_generic(inst, &positions);
    total - barrier_generic(&h, bp)
}

pub fn hamiltonian_value(inst: &ProblemInstance, x: &[f64], p: &[f64], bp: &BarrierParams) -> f64 {
    hamiltonian_value_generic(inst, x, p, bp)
}

/// Exact analytic gradients `(grad_x H, grad_p H)`.
pub fn hamiltonian_grads_generic<R: Real>(
    inst: &ProblemInstance,
    x: &[R],
    p: &[R],
    bp: &BarrierParams,
) -> (Vec<R>, Vec<R>) {
    let n = inst.n_agents();
    let dx = inst.dx();
    let du = dx / 2;
    let c_v = inst.cost.velocity_weight;
    let c_u = inst.cost.control_weight;
    let mut gx = vec![R::zero(); n * dx];
    let mut gp = vec![R::zero(); n * dx];

    for i in 0..n {
        let k = inst.agents[i].drag_coeff;
        let xi = &x[i * dx..(i + 1) * dx];
        let pi = &p[i * dx..(i + 1) * dx];
        let v = &xi[du..];
        let (pw, pv) = pi.split_at(du);
        let speed = regularized_speed(v);
        let mut pv_dot_v = R::zero();
        for c in 0..du {
            pv_dot_v = pv_dot_v + pv[c] * v[c];
        }
        for c in 0..du {
            // dH/dv = pw - k (speed * pv + (pv.v / speed) v) - 2 c_v v
            gx[i * dx + du + c] = pw[c]
                - (speed * pv[c] + (pv_dot_v / speed) * v[c]).scale(k)
                - v[c].scale(2.0 * c_v);
            // dH/dpw = v; dH/dpv = -k speed v + pv / (2 c_u)
            gp[i * dx + c] = v[c];
            gp[i * dx + du + c] = -(speed * v[c]).scale(k) + pv[c].scale(1.0 / (2.0 * c_u));
        }
    }

    // Barrier chain: grad_w H = -grad_w U.
    let mut positions = Vec::with_capacity(n * du);
    for i in 0..n {
        positions.extend_from_slice(&x[i * dx..i * dx + du]);
    }
    let bg = barrier_position_gradient_generic(inst, &positions, bp);
    for i in 0..n {
        for c in 0..du {
            gx[i * dx + c] = gx[i * dx + c] - bg[i * du + c];
        }
    }

    (gx, gp)
}

/// `grad_w U(h(w))` in agent-major position layout (`n_agents * spatial_dim`).
pub fn barrier_position_gradient_generic<R: Real>(
    inst: &ProblemInstance,
    positions: &[R],
    bp: &BarrierParams,
) -> Vec<R> {
    let n = inst.n_agents();
    let du = inst.dx() / 2;
    let mut out = vec![R::zero(); n * du];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut diff = vec![R::zero(); du];
            let mut s = R::zero();
            for c in 0..du {
                let d = positions[i * du + c] - positions[j * du + c];
                diff[c] = d;
                s = s + d * d;
            }
            let dist = s.sqrt();
            let hk = dist - R::from_f64(inst.agents[i].radius + inst.agents[j].radius);
            let coeff = barrier_slope(hk, bp) / dist;
            for c in 0..du {
                let g = coeff * diff[c];
                out[i * du + c] = out[i * du + c] + g;
                out[j * du + c] = out[j * du + c] - g;
            }
        }
    }
    for i in 0..n {
        let w = &positions[i * du..(i + 1) * du];
        for ob in &inst.env.obstacles {
            let hk = obstacle_distance(w, ob) - R::from_f64(inst.agents[i].radius);
            let slope = barrier_slope(hk, bp);
            let grad = obstacle_distance_gradient(w, ob);
            for c in 0..du {
                out[i * du + c] = out[i * du + c] + slope * grad[c];
            }
        }
    }
    out
}

pub fn barrier_position_gradient(
    inst: &ProblemInstance,
    positions: &[f64],
    bp: &BarrierParams,
) -> Vec<f64> {
    barrier_position_gradient_generic(inst, positions, bp)
}

/// Exact gradient of the boundary distance; at box corners the closest-point
/// direction, inside a box the unit normal of the nearest face.
fn obstacle_distance_gradient<R: Real>(w: &[R], ob: &crate::phase::Obstacle) -> Vec<R> {
    use crate::phase::Obstacle;
    match ob {
        Obstacle::Circle { center, .. } => {
            let diff: Vec<R> = w
                .iter()
                .zip(center.iter())
                .map(|(x, c)| *x - R::from_f64(*c))
                .collect();
            let mut s = R::zero();
            for d in &diff {
                s = s + *d * *d;
            }
            let dist = s.sqrt();
            diff.into_iter().map(|d| d / dist).collect()
        }
        Obstacle::AxisBox {
            min_corner,
            max_corner,
        } => {
            let mut diff = vec![R::zero(); w.len()];
            let mut outside = false;
            for (c, (x, (lo, hi))) in w
                .iter()
                .zip(min_corner.iter().zip(max_corner.iter()))
                .enumerate()
            {
                if x.val() < *lo {
                    diff[c] = *x - R::from_f64(*lo);
                    outside = true;
                } else if x.val() > *hi {
                    diff[c] = *x - R::from_f64(*hi);
                    outside = true;
                }
            }
            if outside {
                let mut s = R::zero();
                for d in &diff {
                    s = s + *d * *d;
                }
                let dist = s.sqrt();
                diff.into_iter().map(|d| d / dist).collect()
            } else {
                // Inside: unit normal of the face with the smallest clearance.
                let mut best_axis = 0usize;
                let mut best_sign = -1.0;
                let mut best_val = f64::INFINITY;
                for (c, (x, (lo, hi))) in w
                    .iter()
                    .zip(min_corner.iter().zip(max_corner.iter()))
                    .enumerate()
                {
                    if x.val() - lo < best_val {
                        best_val = x.val() - lo;
                        best_axis = c;
                        best_sign = -1.0;
                    }
                    if hi - x.val() < best_val {
                        best_val = hi - x.val();
                        best_axis = c;
                        best_sign = 1.0;
                    }
                }
                let mut g = vec![R::zero(); w.len()];
                g[best_axis] = R::from_f64(best_sign);
                g
            }
        }
        Obstacle::SegmentWall { endpoints, .. } => {
            let a = &endpoints[0];
            let b = &endpoints[1];
            let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| y - x).collect();
            let len2: f64 = ab.iter().map(|x| x * x).sum();
            let wa: Vec<R> = w
                .iter()
                .zip(a.iter())
                .map(|(x, c)| *x - R::from_f64(*c))
                .collect();
            let mut t = R::zero();
            if len2 > 0.0 {
                for (d, e) in wa.iter().zip(ab.iter()) {
                    t = t + d.scale(*e);
                }
                t = t.scale(1.0 / len2);
                t = t.max(R::zero()).min(R::from_f64(1.0));
            }
            let diff: Vec<R> = wa
                .iter()
                .zip(ab.iter())
                .map(|(d, e)| *d - t.scale(*e))
                .collect();
            let mut s = R::zero();
            for d in &diff {
                s = s + *d * *d;
            }
            let dist = s.sqrt().max(R::from_f64(1e-300));
            diff.into_iter().map(|d| d / dist).collect()
        }
    }
}

pub fn hamiltonian_grads(
    inst: &ProblemInstance,
    x: &[f64],
    p: &[f64],
    bp: &BarrierParams,
) -> (Vec<f64>, Vec<f64>) {
    hamiltonian_grads_generic(inst, x, p, bp)
}

/// Hessian-vector product of `H` at `(x, p)` in direction `(dir_x, dir_p)`,
/// computed by running the analytic gradient on dual numbers.
pub fn hamiltonian_hvp(
    inst: &ProblemInstance,
    x: &[f64],
    p: &[f64],
    bp: &BarrierParams,
    dir_x: &[f64],
    dir_p: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let xd: Vec<Dual> = x
        .iter()
        .zip(dir_x.iter())
        .map(|(v, d)| Dual::new(*v, *d))
        .collect();
    let pd: Vec<Dual> = p
        .iter()
        .zip(dir_p.iter())
        .map(|(v, d)| Dual::new(*v, *d))
        .collect();
    let (gx, gp) = hamiltonian_grads_generic(inst, &xd, &pd, bp);
    (
        gx.into_iter().map(|g| g.d).collect(),
        gp.into_iter().map(|g| g.d).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{AgentSpec, EnvironmentSpec, Obstacle, ProblemInstance};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn two_agent_instance(obstacle: bool) -> ProblemInstance {
        let mut env = EnvironmentSpec::free(2, 1.0);
        if obstacle {
            env.obstacles.push(Obstacle::Circle {
                center: vec![0.0, 0.0],
                radius: 0.15,
            });
        }
        ProblemInstance {
            family_id: "test".into(),
            agents: vec![AgentSpec::new(0.02, 1.0, 4), AgentSpec::new(0.02, 1.0, 4)],
            env,
            x0: vec![vec![0.5, 0.0, 0.0, 0.0], vec![-0.5, 0.0, 0.0, 0.0]],
            x_t: vec![vec![-0.5, 0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0, 0.0]],
            horizon: 1.0,
            seed: 0,
            cost: CostSpec::default(),
        }
    }

    #[test]
    fn drift_at_rest_has_no_drag() {
        let f = dynamics_drift_generic::<f64>(1.0, &[0.3, -0.2, 0.0, 0.0]);
        assert_eq!(&f[..2], &[0.0, 0.0]);
        assert!(f[2].abs() < 1e-15 && f[3].abs() < 1e-15);
    }

    #[test]
    fn drift_without_drag_is_pure_integrator() {
        let f = dynamics_drift_generic::<f64>(0.0, &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(f, vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn drag_block_matches_speed_formula() {
        let f = dynamics_drift_generic::<f64>(1.0, &[0.0, 0.0, 3.0, 4.0]);
        assert!((f[2] + 15.0).abs() < 1e-7, "{}", f[2]);
        assert!((f[3] + 20.0).abs() < 1e-7, "{}", f[3]);
    }

    #[test]
    fn constraint_order_and_values() {
        let inst = two_agent_instance(true);
        let positions = [0.5, 0.0, 0.44, 0.08];
        let h = constraint_values(&inst, &positions);
        assert_eq!(h.len(), 1 + 2);
        let dist = (0.06f64 * 0.06 + 0.08 * 0.08).sqrt();
        assert!((h[0] - (dist - 0.04)).abs() < 1e-14);
        assert!((h[1] - (0.5 - 0.15 - 0.02)).abs() < 1e-14);
    }

    #[test]
    fn pair_entry_for_two_agents_at_distance_point_one() {
        let inst = two_agent_instance(false);
        let h = constraint_values(&inst, &[0.0, 0.0, 0.1, 0.0]);
        assert!((h[0] - 0.06).abs() < 1e-15);
    }

    #[test]
    fn barrier_limits() {
        let bp = BarrierParams::new(1.0, 0.1);
        assert!(barrier(&[10.0], &bp) < 1e-40);
        assert!((barrier(&[0.0], &bp) - 0.1 * std::f64::consts::LN_2).abs() < 1e-15);
        // Hinge limit: ell -> 0 at h = -0.3 gives max(0, -h) = 0.3.
        let sharp = BarrierParams::new(1.0, 1e-5);
        assert!((barrier(&[-0.3], &sharp) - 0.3).abs() < 1e-4);
    }

    #[test]
    fn barrier_is_strictly_decreasing_in_each_component() {
        let bp = BarrierParams::new(0.5, 0.05);
        let mut prev = barrier(&[-0.2], &bp);
        for step in 1..60 {
            let h = -0.2 + 0.02 * step as f64;
            let cur = barrier(&[h], &bp);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn conjugate_control_closed_form_and_argmax() {
        let inst = two_agent_instance(false);
        let u = conjugate_control(&inst, 0, &[0.0, 0.0, 2.0, 0.0]);
        assert_eq!(u, vec![1.0, 0.0]);
        assert_eq!(conjugate_control(&inst, 0, &[0.0; 4]), vec![0.0, 0.0]);

        // Brute-force argmax of <p, u> - |u|^2 over a fine grid.
        let p_v = [1.0, -3.0];
        let u = conjugate_control(&inst, 0, &[0.0, 0.0, p_v[0], p_v[1]]);
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        let steps = 4000;
        for a in 0..=steps {
            let ua = -2.0 + 4.0 * a as f64 / steps as f64;
            let ub_opt = p_v[1] / 2.0; // separable, scan one axis
            let val = p_v[0] * ua + p_v[1] * ub_opt - ua * ua - ub_opt * ub_opt;
            if val > best.0 {
                best = (val, [ua, ub_opt]);
            }
        }
        assert!((u[0] - best.1[0]).abs() < 1e-3);
        assert!((u[1] - 0.5 * p_v[1]).abs() < 1e-12);
        assert!((u[0] - 0.5).abs() < 1e-12 && (u[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_closed_form_cases() {
        let mut inst = two_agent_instance(false);
        inst.agents.truncate(1);
        inst.x0.truncate(1);
        inst.x_t.truncate(1);
        let bp = BarrierParams::new(1.0, 0.1);

        // Rest with zero costate, deep feasibility.
        let h0 = hamiltonian_value(&inst, &[0.5, 0.0, 0.0, 0.0], &[0.0; 4], &bp);
        assert!(h0.abs() < 1e-12);

        // Transport minus velocity cost with k = 0.
        inst.agents[0].drag_coeff = 0.0;
        let h1 = hamiltonian_value(&inst, &[0.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0], &bp);
        assert!(h1.abs() < 1e-12, "{h1}");

        // Drag + control conjugate: H = -2 - 1 + 1 = -2.
        inst.agents[0].drag_coeff = 1.0;
        let h2 = hamiltonian_value(&inst, &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 2.0, 0.0], &bp);
        assert!((h2 + 2.0).abs() < 1e-7, "{h2}");

        // Cross-check against a numeric sup over controls of <p, f + Bu> - l(x, u).
        let x = [0.0, 0.0, 1.0, 0.0];
        let p = [0.0, 0.0, 2.0, 0.0];
        let f = dynamics_drift(&inst, 0, &x);
        let mut sup = f64::NEG_INFINITY;
        let steps = 2000;
        for a in 0..=steps {
            for b in 0..=steps / 100 {
                let u = [-3.0 + 6.0 * a as f64 / steps as f64, -0.3 + 0.6 * b as f64 / (steps / 100) as f64];
                let val = p[2] * (f[2] + u[0]) + p[3] * (f[3] + u[1])
                    - (x[2] * x[2] + x[3] * x[3])
                    - (u[0] * u[0] + u[1] * u[1]);
                sup = sup.max(val);
            }
        }
        assert!((h2 - sup).abs() < 1e-3, "closed form {h2} vs sup {sup}");
    }

    #[test]
    fn gradients_match_central_differences() {
        let inst = two_agent_instance(true);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = inst.half_dim();
        for case in 0..100 {
            let eps = 10f64.powf(rng.random_range(-4.0..0.0));
            let ell = 10f64.powf(rng.random_range(-4.0..0.0));
            let bp = BarrierParams::new(eps, ell);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (gx, gp) = hamiltonian_grads(&inst, &x, &p, &bp);
            let step = 1e-5;
            let mut max_rel: f64 = 0.0;
            for c in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += step;
                xm[c] -= step;
                let fd = (hamiltonian_value(&inst, &xp, &p, &bp)
                    - hamiltonian_value(&inst, &xm, &p, &bp))
                    / (2.0 * step);
                let denom = gx[c].abs().max(1.0);
                max_rel = max_rel.max((gx[c] - fd).abs() / denom);

                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[c] += step;
                pm[c] -= step;
                let fd = (hamiltonian_value(&inst, &x, &pp, &bp)
                    - hamiltonian_value(&inst, &x, &pm, &bp))
                    / (2.0 * step);
                let denom = gp[c].abs().max(1.0);
                max_rel = max_rel.max((gp[c] - fd).abs() / denom);
            }
            assert!(max_rel < 1e-6, "case {case}: max rel err {max_rel}");
        }
    }

    #[test]
    fn grad_p_position_block_is_velocity_when_drag_free() {
        let mut inst = two_agent_instance(false);
        for a in &mut inst.agents {
            a.drag_coeff = 0.0;
        }
        let bp = BarrierParams::new(1.0, 0.1);
        let x = [0.1, 0.2, 0.7, -0.4, -0.3, 0.1, 0.2, 0.9];
        let p = [0.5; 8];
        let (_, gp) = hamiltonian_grads(&inst, &x, &p, &bp);
        assert_eq!(&gp[0..2], &x[2..4]);
        assert_eq!(&gp[4..6], &x[6..8]);
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let inst = two_agent_instance(true);
        let bp = BarrierParams::new(0.1, 0.05);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = inst.half_dim();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dp: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (hx, hp) = hamiltonian_hvp(&inst, &x, &p, &bp, &dx, &dp);
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a - h * d).collect();
        let pp: Vec<f64> = p.iter().zip(&dp).map(|(a, d)| a + h * d).collect();
        let pm: Vec<f64> = p.iter().zip(&dp).map(|(a, d)| a - h * d).collect();
        let (gxp, gpp) = hamiltonian_grads(&inst, &xp, &pp, &bp);
        let (gxm, gpm) = hamiltonian_grads(&inst, &xm, &pm, &bp);
        for c in 0..n {
            let fd = (gxp[c] - gxm[c]) / (2.0 * h);
            assert!((hx[c] - fd).abs() / fd.abs().max(1.0) < 1e-5, "x comp {c}");
            let fd = (gpp[c] - gpm[c]) / (2.0 * h);
            assert!((hp[c] - fd).abs() / fd.abs().max(1.0) < 1e-5, "p comp {c}");
        }
    }

    #[test]
    fn permuting_identical_agents_permutes_constraints() {
        let mut inst = two_agent_instance(true);
        inst.agents.push(AgentSpec::new(0.02, 1.0, 4));
        inst.x0.push(vec![0.0, 0.5, 0.0, 0.0]);
        inst.x_t.push(vec![0.0, -0.5, 0.0, 0.0]);
        let pos = [0.5, 0.0, -0.4, 0.1, 0.0, 0.45];
        let h = constraint_values(&inst, &pos);
        // Swap agents 1 and 2 and recompute: pair entries permute accordingly.
        let pos_swapped = [0.5, 0.0, 0.0, 0.45, -0.4, 0.1];
        let h2 = constraint_values(&inst, &pos_swapped);
        // pairs in order (01, 02, 12); swapping 1<->2 maps (01,02,12) -> (02,01,12)
        assert!((h[0] - h2[1]).abs() < 1e-15);
        assert!((h[1] - h2[0]).abs() < 1e-15);
        assert!((h[2] - h2[2]).abs() < 1e-15);
        // obstacle entries permute blockwise
        assert!((h[3] - h2[3]).abs() < 1e-15);
        assert!((h[4] - h2[5]).abs() < 1e-15);
        assert!((h[5] - h2[4]).abs() < 1e-15);
    }
}
