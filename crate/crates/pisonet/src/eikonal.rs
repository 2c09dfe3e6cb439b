//! Reference-trajectory generation for nonconvex environments: a fast-sweeping
//! Eikonal solve per target, a composite drift field (inter-agent repulsion,
//! wall repulsion, normalized descent of the Eikonal field), stochastic
//! rollouts, detour-ratio selection, and time rescaling onto a grid.

use crate::error::{Error, Result};
use crate::geometry::{point_inside, repulsion_anchor};
use crate::hamiltonian::constraint_values;
use crate::phase::{EnvironmentSpec, ProblemInstance, TimeGrid};
use crate::train::ReferenceTrajectory;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Value considered "inside an obstacle" when reading the solved field.
const OBSTACLE_VALUE: f64 = 1e5;

#[derive(Clone, Debug)]
pub struct ScalarField2D {
    pub origin: [f64; 2],
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
}

impl ScalarField2D {
    fn idx(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    pub fn value_at_node(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.idx(ix, iy)]
    }

    fn clamp_cell(&self, p: &[f64]) -> (usize, usize, f64, f64) {
        let fx = ((p[0] - self.origin[0]) / self.h).clamp(0.0, (self.nx - 1) as f64 - 1e-9);
        let fy = ((p[1] - self.origin[1]) / self.h).clamp(0.0, (self.ny - 1) as f64 - 1e-9);
        let ix = fx.floor() as usize;
        let iy = fy.floor() as usize;
        (ix, iy, fx - ix as f64, fy - iy as f64)
    }

    /// Bilinear interpolation of the precomputed gradient field.
    pub fn gradient_at(&self, p: &[f64]) -> [f64; 2] {
        let (ix, iy, ax, ay) = self.clamp_cell(p);
        let lerp = |g: &[f64]| -> f64 {
            let g00 = g[self.idx(ix, iy)];
            let g10 = g[self.idx(ix + 1, iy)];
            let g01 = g[self.idx(ix, iy + 1)];
            let g11 = g[self.idx(ix + 1, iy + 1)];
            (1.0 - ax) * (1.0 - ay) * g00 + ax * (1.0 - ay) * g10 + (1.0 - ax) * ay * g01
                + ax * ay * g11
        };
        [lerp(&self.grad_x), lerp(&self.grad_y)]
    }

    pub fn value_at(&self, p: &[f64]) -> f64 {
        let (ix, iy, ax, ay) = self.clamp_cell(p);
        let g = &self.values;
        let g00 = g[self.idx(ix, iy)];
        let g10 = g[self.idx(ix + 1, iy)];
        let g01 = g[self.idx(ix, iy + 1)];
        let g11 = g[self.idx(ix + 1, iy + 1)];
        (1.0 - ax) * (1.0 - ay) * g00 + ax * (1.0 - ay) * g10 + (1.0 - ax) * ay * g01 + ax * ay * g11
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub sigma: f64,
    pub dt: f64,
    pub trials: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_steps: usize,
}

impl Default for SdeConfig {
    fn default() -> Self {
        // c1/c2 are tuned so repulsion reaches O(1) within about one agent
        // diameter of contact and is negligible a corridor-width away.
        SdeConfig {
            sigma: 0.01,
            dt: 1e-3,
            trials: 5,
            c1: 50.0,
            c2: 2500.0,
            max_steps: 40_000,
        }
    }
}

/// Godunov upwind update for `|grad u| = f` at spacing `h`.
fn eikonal_update(a: f64, b: f64, h: f64, f: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if hi - lo >= h * f {
        lo + h * f
    } else {
        0.5 * (lo + hi + (2.0 * h * h * f * f - (hi - lo) * (hi - lo)).sqrt())
    }
}

/// Fast-sweeping solve of the Eikonal equation with unit speed in free space
/// and near-zero speed inside obstacles, distance zero at `target`.
pub fn solve_eikonal(env: &EnvironmentSpec, target: &[f64], h: f64) -> Result<ScalarField2D> {
    assert_eq!(env.spatial_dim, 2, "grid solver is 2D");
    if env.obstacles.iter().any(|ob| point_inside(target, ob)) {
        return Err(Error::TargetInObstacle);
    }
    let nx = ((env.domain_max[0] - env.domain_min[0]) / h).round() as usize + 1;
    let ny = ((env.domain_max[1] - env.domain_min[1]) / h).round() as usize + 1;
    let origin = [env.domain_min[0], env.domain_min[1]];
    let mut slowness = vec![1.0; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let p = [origin[0] + ix as f64 * h, origin[1] + iy as f64 * h];
            if env.obstacles.iter().any(|ob| point_inside(&p, ob)) {
                slowness[ix * ny + iy] = 1e6; // speed s = 1e-6
            }
        }
    }
    let big = 1e12;
    let mut u = vec![big; nx * ny];
    // Exact distances in a small disk around the target stabilize the
    // point-source accuracy.
    let seed_radius = 5.0 * h;
    for ix in 0..nx {
        for iy in 0..ny {
            let p = [origin[0] + ix as f64 * h, origin[1] + iy as f64 * h];
            let d = ((p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2)).sqrt();
            if d <= seed_radius && slowness[ix * ny + iy] == 1.0 {
                u[ix * ny + iy] = d;
            }
        }
    }

    let idx = |ix: usize, iy: usize| ix * ny + iy;
    for _sweep_round in 0..200 {
        let mut max_change: f64 = 0.0;
        for ordering in 0..4 {
            let xs: Vec<usize> = if ordering & 1 == 0 {
                (0..nx).collect()
            } else {
                (0..nx).rev().collect()
            };
            let ys: Vec<usize> = if ordering & 2 == 0 {
                (0..ny).collect()
            } else {
                (0..ny).rev().collect()
            };
            for &ix in &xs {
                for &iy in &ys {
                    let a = match (ix > 0, ix + 1 < nx) {
                        (true, true) => u[idx(ix - 1, iy)].min(u[idx(ix + 1, iy)]),
                        (true, false) => u[idx(ix - 1, iy)],
                        (false, true) => u[idx(ix + 1, iy)],
                        _ => big,
                    };
                    let b = match (iy > 0, iy + 1 < ny) {
                        (true, true) => u[idx(ix, iy - 1)].min(u[idx(ix, iy + 1)]),
                        (true, false) => u[idx(ix, iy - 1)],
                        (false, true) => u[idx(ix, iy + 1)],
                        _ => big,
                    };
                    let cand = eikonal_update(a, b, h, slowness[idx(ix, iy)]);
                    if cand < u[idx(ix, iy)] {
                        max_change = max_change.max(u[idx(ix, iy)] - cand);
                        u[idx(ix, iy)] = cand;
                    }
                }
            }
        }
        if max_change < 1e-8 {
            break;
        }
    }

    // Companion gradients: central differences where both neighbors are
    // usable, one-sided toward free space next to obstacles or boundaries.
    let mut grad_x = vec![0.0; nx * ny];
    let mut grad_y = vec![0.0; nx * ny];
    let usable = |v: f64| v < OBSTACLE_VALUE;
    for ix in 0..nx {
        for iy in 0..ny {
            let c = u[idx(ix, iy)];
            let xm = if ix > 0 { Some(u[idx(ix - 1, iy)]) } else { None };
            let xp = if ix + 1 < nx { Some(u[idx(ix + 1, iy)]) } else { None };
            grad_x[idx(ix, iy)] = match (xm, xp) {
                (Some(m), Some(p)) if usable(m) && usable(p) => (p - m) / (2.0 * h),
                (Some(m), _) if usable(m) => (c - m) / h,
                (_, Some(p)) if usable(p) => (p - c) / h,
                _ => 0.0,
            };
            let ym = if iy > 0 { Some(u[idx(ix, iy - 1)]) } else { None };
            let yp = if iy + 1 < ny { Some(u[idx(ix, iy + 1)]) } else { None };
            grad_y[idx(ix, iy)] = match (ym, yp) {
                (Some(m), Some(p)) if usable(m) && usable(p) => (p - m) / (2.0 * h),
                (Some(m), _) if usable(m) => (c - m) / h,
                (_, Some(p)) if usable(p) => (p - c) / h,
                _ => 0.0,
            };
        }
    }

    Ok(ScalarField2D {
        origin,
        h,
        nx,
        ny,
        values: u,
        grad_x,
        grad_y,
    })
}

/// Composite drift: inter-agent repulsion, wall repulsion from the nearest
/// obstacle anchors, and the normalized descent direction of each agent's
/// Eikonal field. `fields` holds one field per agent (or one shared).
pub fn drift_field(
    positions: &[f64],
    fields: &[ScalarField2D],
    env: &EnvironmentSpec,
    inst: &ProblemInstance,
    cfg: &SdeConfig,
) -> Vec<[f64; 2]> {
    let n = inst.n_agents();
    let mut out = vec![[0.0, 0.0]; n];
    for i in 0..n {
        let xi = &positions[2 * i..2 * i + 2];
        let mut v = [0.0, 0.0];
        // Inter-agent repulsion.
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &positions[2 * j..2 * j + 2];
            let dxv = [xi[0] - xj[0], xi[1] - xj[1]];
            let dist = (dxv[0] * dxv[0] + dxv[1] * dxv[1]).sqrt();
            let gap = (dist - inst.agents[i].radius - inst.agents[j].radius).max(1e-4);
            let denom = cfg.c1 * gap * gap;
            v[0] += dxv[0] / denom;
            v[1] += dxv[1] / denom;
        }
        // Wall repulsion from every obstacle's anchor.
        for ob in &env.obstacles {
            let (anchor, r_obs) = repulsion_anchor(xi, ob);
            let dxv = [xi[0] - anchor[0], xi[1] - anchor[1]];
            let dist = (dxv[0] * dxv[0] + dxv[1] * dxv[1]).sqrt();
            let gap = (dist - inst.agents[i].radius - r_obs).max(1e-4);
            let denom = cfg.c2 * gap * gap * gap;
            v[0] += dxv[0] / denom;
            v[1] += dxv[1] / denom;
        }
        // Navigation: normalized descent of the Eikonal field.
        let field = &fields[if fields.len() == 1 { 0 } else { i }];
        let g = field.gradient_at(xi);
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if norm > 1e-12 {
            v[0] -= g[0] / norm;
            v[1] -= g[1] / norm;
        }
        out[i] = v;
    }
    out
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Sampled positions, `steps * n_agents * 2`.
    pub path: Vec<f64>,
    pub steps: usize,
    pub reached: bool,
}

/// Euler–Maruyama rollout with a perturbed-identity metric drawn once per
/// trial. Agents freeze once within `2h` of their targets; the rollout ends
/// when everyone has frozen or `max_steps` is hit.
pub fn rollout_sde(
    inst: &ProblemInstance,
    fields: &[ScalarField2D],
    cfg: &SdeConfig,
    seed: u64,
) -> Rollout {
    let n = inst.n_agents();
    let h = fields[0].h;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // G = I + eta, eta ~ U[-0.01, 0.01] entrywise over the stacked positions.
    let dim = 2 * n;
    let mut metric = vec![0.0; dim * dim];
    for (k, m) in metric.iter_mut().enumerate() {
        let diag = k % (dim + 1) == 0;
        *m = if diag { 1.0 } else { 0.0 } + rng.random_range(-0.01..0.01);
    }
    let mut x: Vec<f64> = inst.positions0().into_iter().flatten().collect();
    let targets: Vec<f64> = inst
        .x_t
        .iter()
        .flat_map(|row| row[..2].iter().copied())
        .collect();
    let mut frozen = vec![false; n];
    let mut path = Vec::with_capacity(cfg.max_steps / 8);
    path.extend_from_slice(&x);
    let mut steps = 1;
    let mut reached = false;
    let sqrt_dt = cfg.dt.sqrt();
    for _ in 0..cfg.max_steps {
        let v = drift_field(&x, fields, &inst.env, inst, cfg);
        let mut stacked = vec![0.0; dim];
        for i in 0..n {
            if !frozen[i] {
                stacked[2 * i] = v[i][0];
                stacked[2 * i + 1] = v[i][1];
            }
        }
        // f = G v
        let mut fx = vec![0.0; dim];
        for r in 0..dim {
            let row = &metric[r * dim..(r + 1) * dim];
            fx[r] = row.iter().zip(&stacked).map(|(a, b)| a * b).sum();
        }
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            let g0 = gaussian(&mut rng);
            let g1 = gaussian(&mut rng);
            x[2 * i] += fx[2 * i] * cfg.dt + cfg.sigma * sqrt_dt * g0;
            x[2 * i + 1] += fx[2 * i + 1] * cfg.dt + cfg.sigma * sqrt_dt * g1;
            let d = ((x[2 * i] - targets[2 * i]).powi(2)
                + (x[2 * i + 1] - targets[2 * i + 1]).powi(2))
            .sqrt();
            if d <= 2.0 * h {
                frozen[i] = true;
                // Park exactly on the target so the endpoint is clean.
                x[2 * i] = targets[2 * i];
                x[2 * i + 1] = targets[2 * i + 1];
            }
        }
        path.extend_from_slice(&x);
        steps += 1;
        if frozen.iter().all(|f| *f) {
            reached = true;
            break;
        }
    }
    Rollout {
        path,
        steps,
        reached,
    }
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u: f64 = rng.random_range(1e-12..1.0);
    let v: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

/// Detour ratio of a rollout: max over agents of arc length over straight-line
/// start-goal distance.
pub fn detour_ratio(rollout: &Rollout, inst: &ProblemInstance) -> f64 {
    let n = inst.n_agents();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut arc = 0.0;
        for s in 1..rollout.steps {
            let a = &rollout.path[(s - 1) * 2 * n + 2 * i..(s - 1) * 2 * n + 2 * i + 2];
            let b = &rollout.path[s * 2 * n + 2 * i..s * 2 * n + 2 * i + 2];
            arc += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        }
        let straight = ((inst.x_t[i][0] - inst.x0[i][0]).powi(2)
            + (inst.x_t[i][1] - inst.x0[i][1]).powi(2))
        .sqrt()
        .max(1e-12);
        worst = worst.max(arc / straight);
    }
    worst
}

fn rollout_collision_free(rollout: &Rollout, inst: &ProblemInstance) -> bool {
    let n = inst.n_agents();
    for s in 0..rollout.steps {
        let positions = &rollout.path[s * 2 * n..(s + 1) * 2 * n];
        let hmin = constraint_values(inst, positions)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if hmin <= 0.0 {
            return false;
        }
    }
    true
}

/// Among reached, collision-free rollouts pick the minimal detour ratio; ties
/// go to the lower trial index.
pub fn select_reference<'r>(
    rollouts: &'r [Rollout],
    inst: &ProblemInstance,
) -> Result<(usize, &'r Rollout)> {
    let mut best: Option<(usize, f64)> = None;
    let mut diagnoses = Vec::new();
    for (k, r) in rollouts.iter().enumerate() {
        if !r.reached {
            diagnoses.push(format!("trial {k}: targets not reached"));
            continue;
        }
        if !rollout_collision_free(r, inst) {
            diagnoses.push(format!("trial {k}: collision along path"));
            continue;
        }
        let c = detour_ratio(r, inst);
        diagnoses.push(format!("trial {k}: admissible, detour ratio {c:.4}"));
        match best {
            Some((_, cb)) if c >= cb - 1e-9 && (c - cb).abs() <= 1e-9 => {}
            Some((_, cb)) if c < cb - 1e-9 => best = Some((k, c)),
            None => best = Some((k, c)),
            _ => {}
        }
    }
    match best {
        Some((k, _)) => Ok((k, &rollouts[k])),
        None => Err(Error::NoAdmissiblePath(diagnoses)),
    }
}

/// Arc-length-uniform reparameterization of a rollout onto the grid: each
/// agent traverses its own polyline at constant speed over `[0, T]`, sampled
/// by linear interpolation along the polyline. Endpoints are exact.
pub fn rescale_time(rollout: &Rollout, n_agents: usize, grid: &TimeGrid) -> ReferenceTrajectory {
    let nt = grid.len();
    let horizon = grid.horizon();
    let steps = rollout.steps;
    let mut positions = vec![0.0; nt * n_agents * 2];
    for i in 0..n_agents {
        // Cumulative arc length of agent i.
        let at = |s: usize| -> [f64; 2] {
            [
                rollout.path[s * 2 * n_agents + 2 * i],
                rollout.path[s * 2 * n_agents + 2 * i + 1],
            ]
        };
        let mut cum = Vec::with_capacity(steps);
        cum.push(0.0);
        for s in 1..steps {
            let a = at(s - 1);
            let b = at(s);
            let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            cum.push(cum[s - 1] + d);
        }
        let total = *cum.last().unwrap();
        let mut cursor = 0usize;
        for (j, t) in grid.times.iter().enumerate() {
            let target_arc = total * t / horizon;
            let point = if j == 0 {
                at(0)
            } else if j == nt - 1 {
                at(steps - 1)
            } else if total == 0.0 {
                at(0)
            } else {
                while cursor + 1 < steps - 1 && cum[cursor + 1] < target_arc {
                    cursor += 1;
                }
                let seg = (cum[cursor + 1] - cum[cursor]).max(1e-300);
                let alpha = ((target_arc - cum[cursor]) / seg).clamp(0.0, 1.0);
                let a = at(cursor);
                let b = at(cursor + 1);
                [a[0] + alpha * (b[0] - a[0]), a[1] + alpha * (b[1] - a[1])]
            };
            positions[(j * n_agents + i) * 2] = point[0];
            positions[(j * n_agents + i) * 2 + 1] = point[1];
        }
    }
    ReferenceTrajectory { positions }
}

/// Homotopy signature of a planar path against horizontal wall bands: the
/// ordered list of `(band index, vertical direction, horizontal side)` full
/// traversals. Positions are `samples * n_agents * 2`; one signature per agent.
pub fn corridor_signature(
    positions: &[f64],
    n_agents: usize,
    bands: &[((f64, f64), i8)],
) -> Vec<Vec<(usize, i8, i8)>> {
    let samples = positions.len() / (2 * n_agents);
    let mut out = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let mut events = Vec::new();
        // Per band: -1 below, 0 inside, +1 above.
        let mut region: Vec<i8> = Vec::new();
        for (b, _) in bands {
            let y0 = positions[2 * i + 1];
            region.push(if y0 < b.0 {
                -1
            } else if y0 > b.1 {
                1
            } else {
                0
            });
        }
        let mut entered_from: Vec<i8> = region.clone();
        for s in 1..samples {
            let x = positions[(s * n_agents + i) * 2];
            let y = positions[(s * n_agents + i) * 2 + 1];
            for (bi, (band, _)) in bands.iter().enumerate() {
                let now = if y < band.0 {
                    -1
                } else if y > band.1 {
                    1
                } else {
                    0
                };
                let prev = region[bi];
                if now != prev {
                    if prev != 0 {
                        entered_from[bi] = prev;
                    }
                    if now != 0 && now != entered_from[bi] {
                        // Full traversal of the band.
                        let side = if x >= 0.0 { 1 } else { -1 };
                        events.push((bi, now, side));
                        entered_from[bi] = now;
                    } else if now != 0 {
                        entered_from[bi] = now;
                    }
                    region[bi] = now;
                }
            }
        }
        out.push(events);
    }
    out
}
