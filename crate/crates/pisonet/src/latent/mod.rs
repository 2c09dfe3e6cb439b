//! The right-space stage: per-agent linear Hamiltonian systems solved exactly
//! by matrix exponentials with two-point boundary conditions. Three variants:
//! plain LQR, LQR with a rotation prior, and LQR composed with a pretrained
//! single-instance decoder.

mod expm;

pub use expm::matrix_exponential;

use crate::error::{Error, Result};
use crate::phase::{AgentSpec, CostSpec, LatentTrajectory, ProblemInstance, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentVariant {
    Lqr,
    LqrRotation,
    LqrComposed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub variant: LatentVariant,
    /// Rotation rate of the latent prior (rad per unit time, 2D only).
    #[serde(default)]
    pub c_b: f64,
    /// Quadratic velocity-cost weight in the latent Hamiltonian.
    #[serde(default)]
    pub c_q: f64,
    /// Checkpoint reference for the composed variant.
    #[serde(default)]
    pub composed_checkpoint: Option<String>,
}

impl LatentConfig {
    pub fn lqr(c_q: f64) -> Self {
        LatentConfig {
            variant: LatentVariant::Lqr,
            c_b: 0.0,
            c_q,
            composed_checkpoint: None,
        }
    }

    pub fn lqr_rotation(c_b: f64, c_q: f64) -> Self {
        LatentConfig {
            variant: LatentVariant::LqrRotation,
            c_b,
            c_q,
            composed_checkpoint: None,
        }
    }
}

/// Per-agent latent system matrix `H = [[A, C], [Q, -A^T]]` with
/// `A = [[0, I], [0, Omega]]`, `Q = diag(0, C_Q I)`, `C = diag(0, I/(2 c_u))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix {
    pub dx: usize,
    pub mat: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

pub fn build_latent_matrix(
    agent: &AgentSpec,
    cfg: &LatentConfig,
    cost: &CostSpec,
) -> Result<LatentMatrix> {
    let dx = agent.state_dim;
    let du = dx / 2;
    let rotating = matches!(cfg.variant, LatentVariant::LqrRotation) && cfg.c_b != 0.0;
    if rotating && du != 2 {
        return Err(Error::UnsupportedVariant(format!(
            "rotation prior requires spatial_dim = 2, got {du}"
        )));
    }
    let mut a = DMatrix::zeros(dx, dx);
    for c in 0..du {
        a[(c, du + c)] = 1.0;
    }
    if rotating {
        a[(du, du + 1)] = -cfg.c_b;
        a[(du + 1, du)] = cfg.c_b;
    }
    let mut q = DMatrix::zeros(dx, dx);
    for c in 0..du {
        q[(du + c, du + c)] = cfg.c_q;
    }
    let mut cmat = DMatrix::zeros(dx, dx);
    for c in 0..du {
        cmat[(du + c, du + c)] = 1.0 / (2.0 * cost.control_weight);
    }
    let mut mat = DMatrix::zeros(2 * dx, 2 * dx);
    mat.view_mut((0, 0), (dx, dx)).copy_from(&a);
    mat.view_mut((0, dx), (dx, dx)).copy_from(&cmat);
    mat.view_mut((dx, 0), (dx, dx)).copy_from(&q);
    mat.view_mut((dx, dx), (dx, dx)).copy_from(&(-a.transpose()));
    Ok(LatentMatrix {
        dx,
        mat,
        a,
        q,
        c: cmat,
    })
}

/// Threshold on the boundary-block condition estimate beyond which the
/// two-point solve is declared a conjugate point.
pub const CONJUGATE_COND_LIMIT: f64 = 1e12;

/// Shared exponential tables for one latent system over one grid.
pub struct LatentPropagator {
    pub matrix: LatentMatrix,
    pub grid: TimeGrid,
    exps: Vec<DMatrix<f64>>,
    m_yy: DMatrix<f64>,
    m_yq_qr: nalgebra::linalg::ColPivQR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cond_estimate: f64,
}

impl LatentPropagator {
    pub fn new(matrix: LatentMatrix, grid: TimeGrid) -> Result<Self> {
        let dx = matrix.dx;
        let exps = grid
            .times
            .iter()
            .map(|t| matrix_exponential(&matrix.mat, *t))
            .collect::<Result<Vec<_>>>()?;
        let m_t = exps.last().expect("nonempty grid");
        let m_yy = m_t.view((0, 0), (dx, dx)).into_owned();
        let m_yq = m_t.view((0, dx), (dx, dx)).into_owned();
        let qr = m_yq.col_piv_qr();
        let diag: Vec<f64> = (0..dx).map(|i| qr.r()[(i, i)].abs()).collect();
        let rmax = diag.iter().cloned().fold(0.0, f64::max);
        let rmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let cond_estimate = if rmin == 0.0 { f64::INFINITY } else { rmax / rmin };
        Ok(LatentPropagator {
            matrix,
            grid,
            exps,
            m_yy,
            m_yq_qr: qr,
            cond_estimate,
        })
    }

    /// Solve the two-point problem for one agent and write its samples into
    /// the trajectory at `agent`.
    pub fn solve_agent(
        &self,
        agent: usize,
        x0_i: &[f64],
        xt_i: &[f64],
        traj: &mut LatentTrajectory,
    ) -> Result<()> {
        let dx = self.matrix.dx;
        if self.cond_estimate > CONJUGATE_COND_LIMIT {
            return Err(Error::ConjugatePoint {
                agent,
                cond: self.cond_estimate,
            });
        }
        let x0 = DVector::from_column_slice(x0_i);
        let xt = DVector::from_column_slice(xt_i);
        let rhs = &xt - &self.m_yy * &x0;
        let q0 = self
            .m_yq_qr
            .solve(&rhs)
            .ok_or(Error::ConjugatePoint {
                agent,
                cond: self.cond_estimate,
            })?;
        let mut z0 = DVector::zeros(2 * dx);
        z0.rows_mut(0, dx).copy_from(&x0);
        z0.rows_mut(dx, dx).copy_from(&q0);
        let n = traj.half_dim();
        for (j, e) in self.exps.iter().enumerate() {
            let z = e * &z0;
            let zdot = &self.matrix.mat * &z;
            let base = j * n + agent * dx;
            for c in 0..dx {
                traj.y[base + c] = z[c];
                traj.q[base + c] = z[dx + c];
                traj.ydot[base + c] = zdot[c];
                traj.qdot[base + c] = zdot[dx + c];
            }
        }
        Ok(())
    }
}

/// Solve the latent boundary-value problem for every agent of the instance.
/// Agents share one exponential table (the latent matrix depends only on the
/// variant parameters and the control cost, not on radii or drag).
pub fn solve_latent_bvp(
    inst: &ProblemInstance,
    cfg: &LatentConfig,
    grid: &TimeGrid,
) -> Result<LatentTrajectory> {
    let prop = LatentPropagator::new(
        build_latent_matrix(&inst.agents[0], cfg, &inst.cost)?,
        grid.clone(),
    )?;
    solve_latent_bvp_with(inst, &prop)
}

/// Same as [`solve_latent_bvp`] but reusing a prebuilt propagator (batched
/// inference path).
pub fn solve_latent_bvp_with(
    inst: &ProblemInstance,
    prop: &LatentPropagator,
) -> Result<LatentTrajectory> {
    let mut traj = LatentTrajectory::zeros(prop.grid.clone(), inst.n_agents(), inst.dx());
    for (i, (x0_i, xt_i)) in inst.x0.iter().zip(inst.x_t.iter()).enumerate() {
        prop.solve_agent(i, x0_i, xt_i, &mut traj)?;
    }
    Ok(traj)
}

/// Latent Hamiltonian value per sample. `matrices` holds either one shared
/// matrix or one per agent.
pub fn latent_energy(traj: &LatentTrajectory, matrices: &[LatentMatrix]) -> Vec<f64> {
    let dx = traj.dx;
    let mut out = Vec::with_capacity(traj.grid.len());
    for j in 0..traj.grid.len() {
        let mut total = 0.0;
        for i in 0..traj.n_agents {
            let m = &matrices[if matrices.len() == 1 { 0 } else { i }];
            let base = j * traj.half_dim() + i * dx;
            let y = DVector::from_column_slice(&traj.y[base..base + dx]);
            let q = DVector::from_column_slice(&traj.q[base..base + dx]);
            total += q.dot(&(&m.a * &y)) - 0.5 * y.dot(&(&m.q * &y)) + 0.5 * q.dot(&(&m.c * &q));
        }
        out.push(total);
    }
    out
}

/// A frozen single-instance decoder used as part of the composed latent
/// variant. Holds the decoder weights and the conditioning vector of the
/// nominal instance it was trained on.
pub struct ComposedMap {
    pub weights: crate::decoder::DecoderWeights,
    pub theta: Vec<f64>,
}

/// Push a latent trajectory through a frozen pretrained decoder. Velocities
/// are recomputed through the map (JVP plus time derivative), replacing the
/// linear-flow identity by the composed-velocity contract.
pub fn compose_pretrained(latent: &LatentTrajectory, map: &ComposedMap) -> LatentTrajectory {
    use crate::decoder;
    let horizon = latent.grid.horizon();
    let mut out = latent.clone();
    let n = latent.half_dim();
    for j in 0..latent.grid.len() {
        let t = latent.grid.times[j];
        let mut z = Vec::with_capacity(2 * n);
        z.extend_from_slice(latent.y_at(j));
        z.extend_from_slice(latent.q_at(j));
        let mut zdot = Vec::with_capacity(2 * n);
        zdot.extend_from_slice(latent.ydot_at(j));
        zdot.extend_from_slice(latent.qdot_at(j));
        let mapped = decoder::decoder_forward(&map.weights, &map.theta, t, horizon, &z);
        let jvp = decoder::decoder_jvp(&map.weights, &map.theta, t, horizon, &z, &zdot);
        let tdot = decoder::decoder_time_derivative(&map.weights, &map.theta, t, horizon, &z);
        let base = j * n;
        for c in 0..n {
            out.y[base + c] = mapped[c];
            out.q[base + c] = mapped[n + c];
            out.ydot[base + c] = jvp[c] + tdot[c];
            out.qdot[base + c] = jvp[n + c] + tdot[n + c];
        }
    }
    out
}

/// Max deviation of the stored velocities from `H (y, q)`; diagnostic for the
/// LQR-variant contract.
pub fn hamiltonian_flow_defect(traj: &LatentTrajectory, matrices: &[LatentMatrix]) -> f64 {
    let dx = traj.dx;
    let mut worst: f64 = 0.0;
    for j in 0..traj.grid.len() {
        for i in 0..traj.n_agents {
            let m = &matrices[if matrices.len() == 1 { 0 } else { i }];
            let base = j * traj.half_dim() + i * dx;
            let mut z = DVector::zeros(2 * dx);
            for c in 0..dx {
                z[c] = traj.y[base + c];
                z[dx + c] = traj.q[base + c];
            }
            let zdot = &m.mat * &z;
            for c in 0..dx {
                worst = worst.max((zdot[c] - traj.ydot[base + c]).abs());
                worst = worst.max((zdot[dx + c] - traj.qdot[base + c]).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{AgentSpec, EnvironmentSpec};

    fn agent(dx: usize) -> AgentSpec {
        AgentSpec::new(0.02, 0.0, dx)
    }

    fn pair_instance() -> ProblemInstance {
        ProblemInstance {
            family_id: "t".into(),
            agents: vec![agent(4), agent(4)],
            env: EnvironmentSpec::free(2, 1.0),
            x0: vec![vec![0.5, 0.0, 0.0, 0.0], vec![-0.5, 0.0, 0.0, 0.0]],
            x_t: vec![vec![-0.5, 0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0, 0.0]],
            horizon: 1.0,
            seed: 0,
            cost: CostSpec::default(),
        }
    }

    fn symplectic_form(dim: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * dim, 2 * dim);
        for c in 0..dim {
            j[(c, dim + c)] = 1.0;
            j[(dim + c, c)] = -1.0;
        }
        j
    }

    #[test]
    fn plain_lqr_blocks() {
        let m = build_latent_matrix(&agent(4), &LatentConfig::lqr(0.0), &CostSpec::default())
            .unwrap();
        assert_eq!(m.c[(2, 2)], 0.5);
        assert_eq!(m.c[(3, 3)], 0.5);
        assert_eq!(m.q.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        // Hamiltonian structure: J H symmetric.
        let j = symplectic_form(4);
        let jh = &j * &m.mat;
        assert!((&jh - jh.transpose()).norm() < 1e-14);
    }

    #[test]
    fn rotation_blocks_and_3d_rejection() {
        let cfg = LatentConfig::lqr_rotation(std::f64::consts::PI / 20.0, 1.0);
        let m = build_latent_matrix(&agent(4), &cfg, &CostSpec::default()).unwrap();
        assert!((m.a[(2, 3)] + std::f64::consts::PI / 20.0).abs() < 1e-15);
        assert!((m.a[(3, 2)] - std::f64::consts::PI / 20.0).abs() < 1e-15);
        let j = symplectic_form(4);
        let jh = &j * &m.mat;
        assert!((&jh - jh.transpose()).norm() < 1e-14);
        assert!(build_latent_matrix(&agent(6), &cfg, &CostSpec::default()).is_err());
    }

    #[test]
    fn exponential_flow_is_symplectic() {
        let cfg = LatentConfig::lqr_rotation(0.3, 1.0);
        let m = build_latent_matrix(&agent(4), &cfg, &CostSpec::default()).unwrap();
        let j = symplectic_form(4);
        for t in [0.1, 0.5, 1.0] {
            let phi = matrix_exponential(&m.mat, t).unwrap();
            let defect = (phi.transpose() * &j * &phi - &j).norm();
            assert!(defect < 1e-10, "t={t}: defect {defect}");
        }
    }

    #[test]
    fn stationary_bvp_holds_position() {
        let mut inst = pair_instance();
        inst.x_t = inst.x0.clone();
        let grid = TimeGrid::uniform(1.0, 33);
        let traj = solve_latent_bvp(&inst, &LatentConfig::lqr(0.0), &grid).unwrap();
        for j in 0..grid.len() {
            for (c, v) in traj.y_at(j).iter().enumerate() {
                let want = inst.x0[c / 4][c % 4];
                assert!((v - want).abs() < 1e-8, "sample {j} comp {c}");
            }
        }
    }

    #[test]
    fn rest_to_rest_matches_cubic_profile() {
        // 1D double integrator: the 4x4 linear boundary-value system.
        let a1 = agent(2);
        let cfg = LatentConfig::lqr(0.0);
        let m = build_latent_matrix(&a1, &cfg, &CostSpec::default()).unwrap();
        let grid = TimeGrid::uniform(1.0, 65);
        let prop = LatentPropagator::new(m, grid.clone()).unwrap();
        let mut traj = LatentTrajectory::zeros(grid.clone(), 1, 2);
        prop.solve_agent(0, &[0.0, 0.0], &[1.0, 0.0], &mut traj)
            .unwrap();
        for (j, t) in grid.times.iter().enumerate() {
            let want = 3.0 * t * t - 2.0 * t * t * t;
            let got = traj.y_at(j)[0];
            assert!((got - want).abs() < 1e-6, "t={t}: {got} vs {want}");
        }
        assert!((traj.y_at(grid.len() - 1)[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rotation_prior_curls_paths_with_consistent_handedness() {
        let inst = pair_instance();
        let grid = TimeGrid::uniform(1.0, 129);
        let signed_area = |c_b: f64| -> f64 {
            let cfg = LatentConfig::lqr_rotation(c_b, 1.0);
            let traj = solve_latent_bvp(&inst, &cfg, &grid).unwrap();
            // Signed area swept by agent 0, path closed by the chord.
            let mut area = 0.0;
            for j in 0..grid.len() - 1 {
                let a = traj.y_at(j);
                let b = traj.y_at(j + 1);
                area += 0.5 * (a[0] * b[1] - b[0] * a[1]);
            }
            let first = traj.y_at(0);
            let last = traj.y_at(grid.len() - 1);
            area + 0.5 * (last[0] * first[1] - first[0] * last[1])
        };
        let pos = signed_area(std::f64::consts::PI / 20.0);
        let neg = signed_area(-std::f64::consts::PI / 20.0);
        assert!(pos > 1e-4, "positive C_B area {pos}");
        assert!(neg < -1e-4, "negative C_B area {neg}");
    }

    #[test]
    fn energy_is_conserved_and_beats_rk4() {
        let inst = pair_instance();
        let grid = TimeGrid::uniform(1.0, 101);
        let cfg = LatentConfig::lqr_rotation(0.2, 1.0);
        let traj = solve_latent_bvp(&inst, &cfg, &grid).unwrap();
        let m = build_latent_matrix(&inst.agents[0], &cfg, &inst.cost).unwrap();
        let energies = latent_energy(&traj, &[m.clone()]);
        let dev_exp = energies
            .iter()
            .map(|e| (e - energies[0]).abs())
            .fold(0.0, f64::max);
        assert!(dev_exp < 1e-9, "exponential-map deviation {dev_exp}");
        assert!(hamiltonian_flow_defect(&traj, &[m.clone()]) < 1e-10);

        // RK4 at dt = 1e-2 drifts more than the exact flow.
        let dx = 4;
        let mut z = DVector::zeros(2 * dx);
        for c in 0..dx {
            z[c] = traj.y_at(0)[c];
            z[dx + c] = traj.q_at(0)[c];
        }
        let h0 = {
            let y = z.rows(0, dx).into_owned();
            let q = z.rows(dx, dx).into_owned();
            q.dot(&(&m.a * &y)) - 0.5 * y.dot(&(&m.q * &y)) + 0.5 * q.dot(&(&m.c * &q))
        };
        let dt = 1e-2;
        let mut dev_rk4: f64 = 0.0;
        for _ in 0..100 {
            let f = |z: &DVector<f64>| &m.mat * z;
            let k1 = f(&z);
            let k2 = f(&(&z + &k1 * (dt / 2.0)));
            let k3 = f(&(&z + &k2 * (dt / 2.0)));
            let k4 = f(&(&z + &k3 * dt));
            z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            let y = z.rows(0, dx).into_owned();
            let q = z.rows(dx, dx).into_owned();
            let e = q.dot(&(&m.a * &y)) - 0.5 * y.dot(&(&m.q * &y)) + 0.5 * q.dot(&(&m.c * &q));
            dev_rk4 = dev_rk4.max((e - h0).abs());
        }
        assert!(
            dev_rk4 > dev_exp,
            "rk4 deviation {dev_rk4} should exceed exact-flow deviation {dev_exp}"
        );
    }

    #[test]
    fn reintegration_consistency() {
        let inst = pair_instance();
        let grid = TimeGrid::uniform(1.0, 11);
        let cfg = LatentConfig::lqr_rotation(0.15, 0.5);
        let traj = solve_latent_bvp(&inst, &cfg, &grid).unwrap();
        let m = build_latent_matrix(&inst.agents[0], &cfg, &inst.cost).unwrap();
        let dx = 4;
        for agent in 0..2 {
            let mut z = DVector::zeros(2 * dx);
            for c in 0..dx {
                z[c] = traj.y_at(0)[agent * dx + c];
                z[dx + c] = traj.q_at(0)[agent * dx + c];
            }
            let dt = 1e-4;
            let mut t = 0.0;
            let mut next = 1;
            let f = |z: &DVector<f64>| &m.mat * z;
            while next < grid.len() {
                let k1 = f(&z);
                let k2 = f(&(&z + &k1 * (dt / 2.0)));
                let k3 = f(&(&z + &k2 * (dt / 2.0)));
                let k4 = f(&(&z + &k3 * dt));
                z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
                t += dt;
                if (t - grid.times[next]).abs() < dt / 2.0 {
                    for c in 0..dx {
                        let err = (z[c] - traj.y_at(next)[agent * dx + c]).abs();
                        assert!(err < 1e-6, "agent {agent} sample {next}: {err}");
                    }
                    next += 1;
                }
            }
        }
    }

    #[test]
    fn agents_decouple_under_permutation() {
        let inst = pair_instance();
        let mut swapped = inst.clone();
        swapped.x0.swap(0, 1);
        swapped.x_t.swap(0, 1);
        let grid = TimeGrid::uniform(1.0, 17);
        let cfg = LatentConfig::lqr_rotation(0.1, 1.0);
        let a = solve_latent_bvp(&inst, &cfg, &grid).unwrap();
        let b = solve_latent_bvp(&swapped, &cfg, &grid).unwrap();
        for j in 0..grid.len() {
            assert_eq!(&a.y_at(j)[0..4], &b.y_at(j)[4..8]);
            assert_eq!(&a.y_at(j)[4..8], &b.y_at(j)[0..4]);
            assert_eq!(&a.q_at(j)[0..4], &b.q_at(j)[4..8]);
        }
    }
}
