//! Direct-transcription reference solver: states and controls discretized on
//! a knot grid, trapezoidal dynamics defects and the smooth barrier folded
//! into a penalty objective, minimized by L-BFGS under a continuation schedule
//! that tightens the defect weight and sharpens the barrier.
//!
//! This is the in-repo optimality yardstick for operator costs; it knows
//! nothing about costates or the decoder.

use crate::error::Result;
use crate::hamiltonian::{barrier_generic, barrier_position_gradient, constraint_values, BarrierParams};
use crate::phase::{ProblemInstance, TimeGrid};
use crate::train::lbfgs_minimize;

#[derive(Clone, Debug)]
pub struct TranscriptionConfig {
    pub knots: usize,
    /// Defect-penalty weights, one continuation stage each.
    pub defect_weights: Vec<f64>,
    /// Barrier parameters per stage (same length as `defect_weights`).
    pub barriers: Vec<(f64, f64)>,
    pub lbfgs_steps_per_stage: usize,
}

impl Default for TranscriptionConfig {
    fn default() -> Self {
        TranscriptionConfig {
            knots: 49,
            defect_weights: vec![1e2, 1e3, 1e4, 1e5],
            barriers: vec![(0.1, 0.1), (0.01, 0.05), (1e-3, 0.02), (1e-4, 0.01)],
            lbfgs_steps_per_stage: 150,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TranscriptionSolution {
    pub grid: TimeGrid,
    /// Knot states, `nt * n_agents * dx`.
    pub states: Vec<f64>,
    /// Knot controls, `nt * n_agents * du`.
    pub controls: Vec<f64>,
    /// Physical running cost (velocity + control quadratics, trapezoidal).
    pub cost: f64,
    pub max_defect: f64,
    pub max_violation: f64,
}

struct Problem<'a> {
    inst: &'a ProblemInstance,
    grid: TimeGrid,
    n: usize,
    du_total: usize,
    nt: usize,
}

impl<'a> Problem<'a> {
    /// Variables: interior states x_1..x_{nt-2} then all controls u_0..u_{nt-1}.
    fn var_count(&self) -> usize {
        (self.nt - 2) * self.n + self.nt * self.du_total
    }

    fn state_at<'v>(&self, vars: &'v [f64], j: usize) -> StateRef<'v, 'a> {
        if j == 0 {
            StateRef::Fixed(self.inst, true)
        } else if j == self.nt - 1 {
            StateRef::Fixed(self.inst, false)
        } else {
            let base = (j - 1) * self.n;
            StateRef::Var(&vars[base..base + self.n])
        }
    }

    fn control_at<'v>(&self, vars: &'v [f64], j: usize) -> &'v [f64] {
        let base = (self.nt - 2) * self.n + j * self.du_total;
        &vars[base..base + self.du_total]
    }
}

enum StateRef<'v, 'a> {
    Var(&'v [f64]),
    Fixed(&'a ProblemInstance, bool),
}

impl StateRef<'_, '_> {
    fn get(&self, buf: &mut Vec<f64>) {
        buf.clear();
        match self {
            StateRef::Var(s) => buf.extend_from_slice(s),
            StateRef::Fixed(inst, initial) => {
                let rows = if *initial { &inst.x0 } else { &inst.x_t };
                for row in rows {
                    buf.extend_from_slice(row);
                }
            }
        }
    }
}

fn drift_and_jacobian_t(
    inst: &ProblemInstance,
    x: &[f64],
    adj: &[f64],
    f_out: &mut [f64],
    jt_adj_out: &mut [f64],
) {
    // f = (v, -k v s(v)); J_f^T a = (0, a_w + D a_v) with
    // D = -k (s I + v v^T / s), symmetric.
    let n_agents = inst.n_agents();
    let dx = inst.dx();
    let du = dx / 2;
    for i in 0..n_agents {
        let k = inst.agents[i].drag_coeff;
        let v = &x[i * dx + du..(i + 1) * dx];
        let s = (v.iter().map(|a| a * a).sum::<f64>() + 1e-16).sqrt();
        let a_w = &adj[i * dx..i * dx + du];
        let a_v = &adj[i * dx + du..(i + 1) * dx];
        let v_dot_av: f64 = v.iter().zip(a_v).map(|(a, b)| a * b).sum();
        for c in 0..du {
            f_out[i * dx + c] = v[c];
            f_out[i * dx + du + c] = -k * v[c] * s;
            jt_adj_out[i * dx + c] = 0.0;
            jt_adj_out[i * dx + du + c] =
                a_w[c] - k * (s * a_v[c] + v_dot_av * v[c] / s);
        }
    }
}

/// Objective and gradient of the penalty transcription at one stage.
fn objective(
    p: &Problem<'_>,
    vars: &[f64],
    mu: f64,
    bp: &BarrierParams,
    grad: &mut [f64],
) -> f64 {
    let inst = p.inst;
    let n_agents = inst.n_agents();
    let dx = inst.dx();
    let du = dx / 2;
    let c_v = inst.cost.velocity_weight;
    let c_u = inst.cost.control_weight;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;

    let mut xj = Vec::with_capacity(p.n);
    let mut xj1 = Vec::with_capacity(p.n);
    let mut fj = vec![0.0; p.n];
    let mut fj1 = vec![0.0; p.n];
    let mut jt = vec![0.0; p.n];

    // Running cost + barrier at knots, trapezoid weights.
    for j in 0..p.nt {
        let w = trapezoid_weight(&p.grid, j);
        p.state_at(vars, j).get(&mut xj);
        let u = p.control_at(vars, j);
        let mut positions = Vec::with_capacity(n_agents * du);
        for i in 0..n_agents {
            positions.extend_from_slice(&xj[i * dx..i * dx + du]);
            let v = &xj[i * dx + du..(i + 1) * dx];
            total += w * c_v * v.iter().map(|a| a * a).sum::<f64>();
            total += w * c_u
                * u[i * du..(i + 1) * du].iter().map(|a| a * a).sum::<f64>();
        }
        let h = constraint_values(inst, &positions);
        total += w * barrier_generic(&h, bp);

        // Gradients of the knot terms.
        let bg = barrier_position_gradient(inst, &positions, bp);
        if j > 0 && j < p.nt - 1 {
            let base = (j - 1) * p.n;
            for i in 0..n_agents {
                for c in 0..du {
                    grad[base + i * dx + c] += w * bg[i * du + c];
                    grad[base + i * dx + du + c] += 2.0 * w * c_v * xj[i * dx + du + c];
                }
            }
        }
        let ubase = (p.nt - 2) * p.n + j * p.du_total;
        for c in 0..p.du_total {
            grad[ubase + c] += 2.0 * w * c_u * u[c];
        }
    }

    // Dynamics defects between consecutive knots.
    for j in 0..p.nt - 1 {
        let dt = p.grid.times[j + 1] - p.grid.times[j];
        p.state_at(vars, j).get(&mut xj);
        p.state_at(vars, j + 1).get(&mut xj1);
        let uj = p.control_at(vars, j);
        let uj1 = p.control_at(vars, j + 1);
        // f + B u at both ends (control enters the velocity block).
        let zero = vec![0.0; p.n];
        drift_and_jacobian_t(inst, &xj, &zero, &mut fj, &mut jt);
        drift_and_jacobian_t(inst, &xj1, &zero, &mut fj1, &mut jt);
        let mut defect = vec![0.0; p.n];
        for i in 0..n_agents {
            for c in 0..dx {
                let idx = i * dx + c;
                let mut rhs_j = fj[idx];
                let mut rhs_j1 = fj1[idx];
                if c >= du {
                    rhs_j += uj[i * du + (c - du)];
                    rhs_j1 += uj1[i * du + (c - du)];
                }
                defect[idx] = xj1[idx] - xj[idx] - 0.5 * dt * (rhs_j + rhs_j1);
            }
        }
        let d2: f64 = defect.iter().map(|d| d * d).sum();
        total += mu * d2;

        // Backward: adjoint a = 2 mu defect.
        let adj: Vec<f64> = defect.iter().map(|d| 2.0 * mu * d).collect();
        // d defect / d x_{j+1} = I - dt/2 J_f(x_{j+1})
        if j + 1 < p.nt - 1 {
            drift_and_jacobian_t(inst, &xj1, &adj, &mut fj1, &mut jt);
            let base = j * p.n;
            for c in 0..p.n {
                grad[base + c] += adj[c] - 0.5 * dt * jt[c];
            }
        }
        // d defect / d x_j = -I - dt/2 J_f(x_j)
        if j > 0 {
            drift_and_jacobian_t(inst, &xj, &adj, &mut fj, &mut jt);
            let base = (j - 1) * p.n;
            for c in 0..p.n {
                grad[base + c] += -adj[c] - 0.5 * dt * jt[c];
            }
        }
        // d defect / d u = -dt/2 B^T per end.
        let ubase_j = (p.nt - 2) * p.n + j * p.du_total;
        let ubase_j1 = (p.nt - 2) * p.n + (j + 1) * p.du_total;
        for i in 0..n_agents {
            for c in 0..du {
                let a = adj[i * dx + du + c];
                grad[ubase_j + i * du + c] -= 0.5 * dt * a;
                grad[ubase_j1 + i * du + c] -= 0.5 * dt * a;
            }
        }
    }
    total
}

fn trapezoid_weight(grid: &TimeGrid, j: usize) -> f64 {
    let nt = grid.len();
    if j == 0 {
        0.5 * (grid.times[1] - grid.times[0])
    } else if j == nt - 1 {
        0.5 * (grid.times[nt - 1] - grid.times[nt - 2])
    } else {
        0.5 * (grid.times[j + 1] - grid.times[j - 1])
    }
}

/// Smooth rest-to-rest seed along straight lines.
fn initial_guess(p: &Problem<'_>) -> Vec<f64> {
    let inst = p.inst;
    let dx = inst.dx();
    let du = dx / 2;
    let horizon = p.grid.horizon();
    let mut vars = vec![0.0; p.var_count()];
    for j in 1..p.nt - 1 {
        let tau = p.grid.times[j] / horizon;
        let s = 3.0 * tau * tau - 2.0 * tau * tau * tau;
        let sdot = (6.0 * tau - 6.0 * tau * tau) / horizon;
        let base = (j - 1) * p.n;
        for (i, (r0, rt)) in inst.x0.iter().zip(&inst.x_t).enumerate() {
            for c in 0..du {
                vars[base + i * dx + c] = r0[c] + s * (rt[c] - r0[c]);
                vars[base + i * dx + du + c] = sdot * (rt[c] - r0[c]);
            }
        }
    }
    vars
}

/// Solve the instance by penalty transcription with continuation.
pub fn transcription_solve(
    inst: &ProblemInstance,
    cfg: &TranscriptionConfig,
) -> Result<TranscriptionSolution> {
    assert_eq!(cfg.defect_weights.len(), cfg.barriers.len());
    let grid = TimeGrid::uniform(inst.horizon, cfg.knots);
    let p = Problem {
        inst,
        grid: grid.clone(),
        n: inst.half_dim(),
        du_total: inst.n_agents() * inst.dx() / 2,
        nt: cfg.knots,
    };
    let mut vars = initial_guess(&p);
    for (mu, (eps, ell)) in cfg.defect_weights.iter().zip(&cfg.barriers) {
        let bp = BarrierParams::new(*eps, *ell);
        let mut closure = |x: &[f64], g: &mut [f64]| objective(&p, x, *mu, &bp, g);
        let out = lbfgs_minimize(&mut closure, vars, cfg.lbfgs_steps_per_stage, 10);
        vars = out.x;
    }

    // Extract the solution.
    let dx = inst.dx();
    let du = dx / 2;
    let n_agents = inst.n_agents();
    let mut states = Vec::with_capacity(p.nt * p.n);
    let mut controls = Vec::with_capacity(p.nt * p.du_total);
    let mut buf = Vec::new();
    for j in 0..p.nt {
        p.state_at(&vars, j).get(&mut buf);
        states.extend_from_slice(&buf);
        controls.extend_from_slice(p.control_at(&vars, j));
    }
    // Physical cost and diagnostics.
    let mut cost = 0.0;
    let mut max_violation: f64 = 0.0;
    for j in 0..p.nt {
        let w = trapezoid_weight(&grid, j);
        let x = &states[j * p.n..(j + 1) * p.n];
        let u = &controls[j * p.du_total..(j + 1) * p.du_total];
        let mut positions = Vec::with_capacity(n_agents * du);
        for i in 0..n_agents {
            positions.extend_from_slice(&x[i * dx..i * dx + du]);
            let v = &x[i * dx + du..(i + 1) * dx];
            cost += w * inst.cost.velocity_weight * v.iter().map(|a| a * a).sum::<f64>();
            cost += w
                * inst.cost.control_weight
                * u[i * du..(i + 1) * du].iter().map(|a| a * a).sum::<f64>();
        }
        let hmin = constraint_values(inst, &positions)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        max_violation = max_violation.max(-hmin.min(0.0));
    }
    let mut max_defect: f64 = 0.0;
    let zero = vec![0.0; p.n];
    let mut f0 = vec![0.0; p.n];
    let mut f1 = vec![0.0; p.n];
    let mut jt = vec![0.0; p.n];
    for j in 0..p.nt - 1 {
        let dt = grid.times[j + 1] - grid.times[j];
        let xj = &states[j * p.n..(j + 1) * p.n];
        let xj1 = &states[(j + 1) * p.n..(j + 2) * p.n];
        drift_and_jacobian_t(inst, xj, &zero, &mut f0, &mut jt);
        drift_and_jacobian_t(inst, xj1, &zero, &mut f1, &mut jt);
        let uj = &controls[j * p.du_total..(j + 1) * p.du_total];
        let uj1 = &controls[(j + 1) * p.du_total..(j + 2) * p.du_total];
        for i in 0..n_agents {
            for c in 0..dx {
                let idx = i * dx + c;
                let mut rj = f0[idx];
                let mut rj1 = f1[idx];
                if c >= du {
                    rj += uj[i * du + (c - du)];
                    rj1 += uj1[i * du + (c - du)];
                }
                let d = xj1[idx] - xj[idx] - 0.5 * dt * (rj + rj1);
                max_defect = max_defect.max(d.abs());
            }
        }
    }
    Ok(TranscriptionSolution {
        grid,
        states,
        controls,
        cost,
        max_defect,
        max_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{AgentSpec, CostSpec, EnvironmentSpec};

    fn rest_to_rest() -> ProblemInstance {
        ProblemInstance {
            family_id: "line".into(),
            agents: vec![AgentSpec::new(0.02, 0.0, 4)],
            env: EnvironmentSpec::free(2, 2.0),
            x0: vec![vec![0.0, 0.0, 0.0, 0.0]],
            x_t: vec![vec![1.0, 0.0, 0.0, 0.0]],
            horizon: 1.0,
            seed: 0,
            cost: CostSpec {
                velocity_weight: 0.0,
                control_weight: 1.0,
            },
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut inst = rest_to_rest();
        inst.agents[0].drag_coeff = 0.7;
        inst.cost.velocity_weight = 0.5;
        inst.env.obstacles.push(crate::phase::Obstacle::Circle {
            center: vec![0.5, 0.4],
            radius: 0.15,
        });
        let p = Problem {
            inst: &inst,
            grid: TimeGrid::uniform(1.0, 7),
            n: 4,
            du_total: 2,
            nt: 7,
        };
        let mut vars = initial_guess(&p);
        // Perturb so nothing sits at a symmetric point.
        for (i, v) in vars.iter_mut().enumerate() {
            *v += 0.01 * ((i as f64) * 0.7).sin();
        }
        let bp = BarrierParams::new(0.1, 0.1);
        let mut grad = vec![0.0; vars.len()];
        let f0 = objective(&p, &vars, 10.0, &bp, &mut grad);
        assert!(f0.is_finite());
        let h = 1e-6;
        let mut scratch = vec![0.0; vars.len()];
        for idx in 0..vars.len() {
            let mut vp = vars.clone();
            let mut vm = vars.clone();
            vp[idx] += h;
            vm[idx] -= h;
            let fp = objective(&p, &vp, 10.0, &bp, &mut scratch);
            let fm = objective(&p, &vm, 10.0, &bp, &mut scratch);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-5, "var {idx}: {} vs {fd}", grad[idx]);
        }
    }

    #[test]
    fn recovers_minimal_energy_cost_twelve() {
        let inst = rest_to_rest();
        let sol = transcription_solve(&inst, &TranscriptionConfig::default()).unwrap();
        assert!(sol.max_defect < 1e-3, "defect {}", sol.max_defect);
        assert!(
            (sol.cost - 12.0).abs() / 12.0 < 0.01,
            "cost {} (defect {})",
            sol.cost,
            sol.max_defect
        );
        assert_eq!(sol.max_violation, 0.0);
    }

    #[test]
    fn matches_latent_bvp_on_zero_interaction_case() {
        let mut inst = rest_to_rest();
        inst.cost.velocity_weight = 1.0;
        let sol = transcription_solve(&inst, &TranscriptionConfig::default()).unwrap();
        // Exact optimum from the linear boundary-value solve (C_Q = 2 c_v).
        let grid = TimeGrid::uniform(1.0, 257);
        let latent = crate::latent::solve_latent_bvp(
            &inst,
            &crate::latent::LatentConfig::lqr(2.0),
            &grid,
        )
        .unwrap();
        let mut traj = crate::phase::PhaseTrajectory::zeros(grid, 1, 4);
        traj.x.copy_from_slice(&latent.y);
        traj.p.copy_from_slice(&latent.q);
        let exact = crate::eval::running_cost(&traj, &inst);
        let rel = (sol.cost - exact).abs() / exact;
        assert!(rel < 0.01, "transcription {} vs exact {exact}", sol.cost);
    }
}
