//! Metrics mirroring the benchmark reporting: running cost via recovered
//! controls, continuous-time safety violation on a refined grid, pass rates,
//! and PMP residual summaries, plus batched-inference wall clock.

use crate::decoder::{condition_base, decoder_forward_with, DecoderWeights};
use crate::error::Result;
use crate::hamiltonian::{constraint_values, conjugate_control, BarrierParams};
use crate::latent::{
    build_latent_matrix, compose_pretrained, solve_latent_bvp_with, ComposedMap, LatentConfig,
    LatentPropagator, LatentVariant,
};
use crate::phase::{PhaseTrajectory, ProblemInstance, TimeGrid};
use crate::train::{pmp_residuals, CollocationData};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub cost: f64,
    pub max_violation: f64,
    pub pass: bool,
    pub mean_pmp_residual: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<InstanceMetrics>,
    pub pass_count: usize,
    pub total: usize,
    pub avg_cost: f64,
    pub avg_max_violation: f64,
    pub avg_residual: f64,
    /// Wall clock of the batched forward pass (latent solve + decoder) only.
    pub batch_wall_seconds: f64,
}

impl EvalReport {
    fn aggregate(rows: Vec<InstanceMetrics>, wall: f64) -> EvalReport {
        let total = rows.len();
        let pass_count = rows.iter().filter(|r| r.pass).count();
        let mean = |f: &dyn Fn(&InstanceMetrics) -> f64| -> f64 {
            if total == 0 {
                0.0
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / total as f64
            }
        };
        EvalReport {
            pass_count,
            total,
            avg_cost: mean(&|r| r.cost),
            avg_max_violation: mean(&|r| r.max_violation),
            avg_residual: mean(&|r| r.mean_pmp_residual),
            batch_wall_seconds: wall,
            rows,
        }
    }

    /// Aligned text table, one row per instance plus the aggregate line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("  idx        cost   max_violation  pass   mean_pmp_residual\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{i:5}  {:>10.4e}  {:>14.4e}  {:>4}  {:>17.4e}\n",
                r.cost,
                r.max_violation,
                if r.pass { "yes" } else { "no" },
                r.mean_pmp_residual
            ));
        }
        out.push_str(&format!(
            "total {}/{} pass  avg cost {:.4e}  avg violation {:.4e}  avg residual {:.4e}  batch {:.4}s\n",
            self.pass_count, self.total, self.avg_cost, self.avg_max_violation, self.avg_residual,
            self.batch_wall_seconds
        ));
        out
    }
}

/// Trapezoidal quadrature of the physical running cost
/// `sum_i c_v |v_i|^2 + c_u |u_i|^2` with controls recovered from the costate.
/// The barrier is a relaxation device and is excluded.
pub fn running_cost(traj: &PhaseTrajectory, inst: &ProblemInstance) -> f64 {
    let nt = traj.grid.len();
    let n_agents = traj.n_agents;
    let dx = traj.dx;
    let du = dx / 2;
    let c_v = inst.cost.velocity_weight;
    let c_u = inst.cost.control_weight;
    let mut integrand = Vec::with_capacity(nt);
    for j in 0..nt {
        let x = traj.x_at(j);
        let p = traj.p_at(j);
        let mut val = 0.0;
        for i in 0..n_agents {
            let v = &x[i * dx + du..(i + 1) * dx];
            let u = conjugate_control(inst, i, &p[i * dx..(i + 1) * dx]);
            val += c_v * v.iter().map(|x| x * x).sum::<f64>()
                + c_u * u.iter().map(|x| x * x).sum::<f64>();
        }
        integrand.push(val);
    }
    let mut total = 0.0;
    for j in 0..nt - 1 {
        let dt = traj.grid.times[j + 1] - traj.grid.times[j];
        total += 0.5 * dt * (integrand[j] + integrand[j + 1]);
    }
    total
}

fn min_constraint(inst: &ProblemInstance, positions: &[f64]) -> f64 {
    constraint_values(inst, positions)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Max violation of a sampled trajectory on an `m`-times denser grid, using
/// linear interpolation of positions between samples. Pass iff exactly zero.
pub fn safety_violation(traj: &PhaseTrajectory, inst: &ProblemInstance, m: usize) -> (f64, bool) {
    assert!(m >= 1);
    let n_agents = traj.n_agents;
    let dx = traj.dx;
    let du = dx / 2;
    let mut worst: f64 = 0.0;
    for j in 0..traj.grid.len() - 1 {
        for k in 0..m {
            let alpha = k as f64 / m as f64;
            let xa = traj.x_at(j);
            let xb = traj.x_at(j + 1);
            let mut positions = Vec::with_capacity(n_agents * du);
            for i in 0..n_agents {
                for c in 0..du {
                    let idx = i * dx + c;
                    positions.push(xa[idx] + alpha * (xb[idx] - xa[idx]));
                }
            }
            worst = worst.max(-min_constraint(inst, &positions).min(0.0));
        }
    }
    // Final sample.
    let xl = traj.x_at(traj.grid.len() - 1);
    let mut positions = Vec::with_capacity(n_agents * du);
    for i in 0..n_agents {
        positions.extend_from_slice(&xl[i * dx..i * dx + du]);
    }
    worst = worst.max(-min_constraint(inst, &positions).min(0.0));
    (worst, worst == 0.0)
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Collocation count of the base grid used for residual reporting.
    pub grid_count: usize,
    /// Refinement factor of the dense safety/cost grid.
    pub refine_m: usize,
    /// Barrier parameters for the PMP-residual metric (typically the final
    /// annealed values of the checkpoint).
    pub barrier: BarrierParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid_count: 64,
            refine_m: 10,
            barrier: BarrierParams::new(1e-4, 1e-4),
        }
    }
}

/// Batched inference plus per-instance metrics. The wall clock covers the
/// forward path only (latent solves and decoder evaluations on the dense
/// grid); metric extraction is untimed.
pub fn evaluate_batch(
    instances: &[ProblemInstance],
    weights: &DecoderWeights,
    encoding: &[crate::decoder::ThetaComponent],
    latent_cfg: &LatentConfig,
    composed: Option<&ComposedMap>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Ok(EvalReport::aggregate(Vec::new(), 0.0));
    }
    let base_grid = TimeGrid::uniform(instances[0].horizon, cfg.grid_count);
    let dense_grid = base_grid.refine(cfg.refine_m);

    // Timed batched forward pass.
    let start = std::time::Instant::now();
    let trajectories = infer_batch(instances, weights, encoding, latent_cfg, composed, &dense_grid)?;
    let wall = start.elapsed().as_secs_f64();

    let mut rows = Vec::with_capacity(instances.len());
    for (inst, traj) in instances.iter().zip(&trajectories) {
        let cost = running_cost(traj, inst);
        // The dense trajectory already samples the refined grid; violation is
        // the max over its own samples.
        let (max_violation, pass) = safety_violation(traj, inst, 1);
        // Residuals on the base grid.
        let data = crate::train::prepare_instance(inst, encoding, latent_cfg, composed, &base_grid)?;
        let (rx, rp) = pmp_residuals(inst, weights, &data.theta, &data.latent, &cfg.barrier);
        let mut norm_sum = 0.0;
        for (a, b) in rx.iter().zip(rp.iter()) {
            let s: f64 = a.iter().map(|v| v * v).sum::<f64>()
                + b.iter().map(|v| v * v).sum::<f64>();
            norm_sum += s.sqrt();
        }
        rows.push(InstanceMetrics {
            cost,
            max_violation,
            pass,
            mean_pmp_residual: norm_sum / base_grid.len() as f64,
        });
    }
    Ok(EvalReport::aggregate(rows, wall))
}

/// Forward inference of a batch on an arbitrary grid, sharing one exponential
/// table across instances.
pub fn infer_batch(
    instances: &[ProblemInstance],
    weights: &DecoderWeights,
    encoding: &[crate::decoder::ThetaComponent],
    latent_cfg: &LatentConfig,
    composed: Option<&ComposedMap>,
    grid: &TimeGrid,
) -> Result<Vec<PhaseTrajectory>> {
    let first = &instances[0];
    let prop = LatentPropagator::new(
        build_latent_matrix(&first.agents[0], latent_cfg, &first.cost)?,
        grid.clone(),
    )?;
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let mut latent = solve_latent_bvp_with(inst, &prop)?;
        if matches!(latent_cfg.variant, LatentVariant::LqrComposed) {
            if let Some(map) = composed {
                latent = compose_pretrained(&latent, map);
            }
        }
        let theta = crate::decoder::encode_theta(inst, encoding)?;
        let data = CollocationData {
            inst: inst.clone(),
            theta,
            latent,
        };
        out.push(decode_data(weights, &data));
    }
    Ok(out)
}

fn decode_data(weights: &DecoderWeights, data: &CollocationData) -> PhaseTrajectory {
    let latent = &data.latent;
    let n = latent.half_dim();
    let horizon = latent.grid.horizon();
    let base = condition_base(weights, &data.theta);
    let mut traj = PhaseTrajectory::zeros(latent.grid.clone(), latent.n_agents, latent.dx);
    for j in 0..latent.grid.len() {
        let t = latent.grid.times[j];
        let mut z = Vec::with_capacity(2 * n);
        z.extend_from_slice(latent.y_at(j));
        z.extend_from_slice(latent.q_at(j));
        let mapped = decoder_forward_with(weights, &base, t, horizon, &z);
        traj.x[j * n..(j + 1) * n].copy_from_slice(&mapped[..n]);
        traj.p[j * n..(j + 1) * n].copy_from_slice(&mapped[n..]);
    }
    traj
}
