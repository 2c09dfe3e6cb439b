//! Physics-informed training: residual loss, Adam with barrier continuation,
//! limited-memory quasi-Newton polish, regression pretraining from reference
//! trajectories, per-instance test-time refinement, and a finite-difference
//! gradient check.

mod adam;
mod lbfgs;
mod loss;

pub use lbfgs::minimize as lbfgs_minimize;
pub use loss::{
    batch_loss_grad, instance_loss_grad, pmp_residuals, prepare_instance, BatchLoss,
    CollocationData,
};

use crate::decoder::{
    condition_base, decoder_decode_with, init_weights, DecoderConfig, DecoderWeights,
    GradAccumulator,
};
use crate::error::{Error, Result};
use crate::hamiltonian::BarrierParams;
use crate::latent::{ComposedMap, LatentConfig};
use crate::phase::{PhaseTrajectory, ProblemInstance, TimeGrid};
use crate::scenario::FamilySpec;
use adam::Adam;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnealSchedule {
    Geometric {
        eps0: f64,
        ell0: f64,
        rho_eps: f64,
        rho_ell: f64,
        period_steps: usize,
    },
    Fixed {
        eps: f64,
        ell: f64,
    },
}

impl AnnealSchedule {
    pub fn state_at(&self, step: usize) -> AnnealState {
        match self {
            AnnealSchedule::Fixed { eps, ell } => AnnealState {
                stage: 0,
                eps: *eps,
                ell: *ell,
                carried: step > 0,
            },
            AnnealSchedule::Geometric {
                eps0,
                ell0,
                rho_eps,
                rho_ell,
                period_steps,
            } => {
                let stage = step / (*period_steps).max(1);
                AnnealState {
                    stage,
                    eps: eps0 * rho_eps.powi(stage as i32),
                    ell: ell0 * rho_ell.powi(stage as i32),
                    carried: step > 0,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnnealSchedule::Fixed { eps, ell } => {
                if *eps > 0.0 && *ell > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Format("fixed barrier parameters must be positive".into()))
                }
            }
            AnnealSchedule::Geometric { eps0, ell0, rho_eps, rho_ell, .. } => {
                if *eps0 > 0.0
                    && *ell0 > 0.0
                    && (0.0..1.0).contains(rho_eps)
                    && (0.0..1.0).contains(rho_ell)
                    && *rho_eps > 0.0
                    && *rho_ell > 0.0
                {
                    Ok(())
                } else {
                    Err(Error::Format(
                        "geometric schedule needs eps0, ell0 > 0 and 0 < rho < 1".into(),
                    ))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub stage: usize,
    pub eps: f64,
    pub ell: f64,
    /// Whether optimizer state was carried into this stage from the previous one.
    pub carried: bool,
}

impl AnnealState {
    pub fn barrier(&self) -> BarrierParams {
        BarrierParams::new(self.eps, self.ell)
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_memory() -> usize {
    10
}
fn default_nt() -> usize {
    64
}
fn default_pretrain() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam_steps: usize,
    pub lbfgs_steps: usize,
    #[serde(default = "default_lr")]
    pub adam_lr: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_memory")]
    pub lbfgs_memory: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub ic_weight: f64,
    #[serde(default)]
    pub tc_weight: f64,
    pub anneal: AnnealSchedule,
    /// 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_nt")]
    pub collocation_count: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_pretrain")]
    pub pretrain_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam_steps: 150,
            lbfgs_steps: 100,
            adam_lr: default_lr(),
            adam_betas: default_betas(),
            adam_eps: default_adam_eps(),
            lbfgs_memory: default_memory(),
            weight_decay: 0.0,
            ic_weight: 0.0,
            tc_weight: 0.0,
            anneal: AnnealSchedule::Fixed { eps: 1e-4, ell: 1e-4 },
            batch_size: 0,
            collocation_count: default_nt(),
            rng_seed: 0,
            pretrain_steps: default_pretrain(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub barrier_path: Vec<(f64, f64)>,
    pub adam_steps_taken: usize,
    pub lbfgs_steps_taken: usize,
    pub pretrain_steps_taken: usize,
    pub wall_seconds: f64,
    pub final_eps: f64,
    pub final_ell: f64,
    pub max_ic_mismatch: f64,
    pub max_tc_mismatch: f64,
    pub line_search_failed: bool,
}

/// Reference positions on the collocation grid, agent-major per sample
/// (`nt * n_agents * spatial_dim` values).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub positions: Vec<f64>,
}

pub struct Trainer<'a> {
    pub family: &'a FamilySpec,
    pub cfg: &'a TrainConfig,
    pub decoder_cfg: &'a DecoderConfig,
    pub latent_cfg: &'a LatentConfig,
    pub composed: Option<&'a ComposedMap>,
    pub pretrain_refs: Option<&'a [ReferenceTrajectory]>,
    pub progress: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        family: &'a FamilySpec,
        cfg: &'a TrainConfig,
        decoder_cfg: &'a DecoderConfig,
        latent_cfg: &'a LatentConfig,
    ) -> Self {
        Trainer {
            family,
            cfg,
            decoder_cfg,
            latent_cfg,
            composed: None,
            pretrain_refs: None,
            progress: false,
        }
    }

    pub fn prepare(&self, instances: &[ProblemInstance]) -> Result<Vec<CollocationData>> {
        let grid = TimeGrid::uniform(self.family.horizon, self.cfg.collocation_count);
        instances
            .iter()
            .map(|inst| {
                prepare_instance(
                    inst,
                    &self.family.theta_encoding,
                    self.latent_cfg,
                    self.composed,
                    &grid,
                )
            })
            .collect()
    }

    fn batch_slice(&self, data: &[CollocationData], step: usize) -> Vec<CollocationData> {
        let b = self.cfg.batch_size;
        if b == 0 || b >= data.len() {
            return data.to_vec();
        }
        let start = (step * b) % data.len();
        (0..b).map(|i| data[(start + i) % data.len()].clone()).collect()
    }

    pub fn train(&self, instances: &[ProblemInstance]) -> Result<(DecoderWeights, TrainReport)> {
        self.cfg.anneal.validate()?;
        if instances.is_empty() {
            return Err(Error::Mismatch("training set is empty".into()));
        }
        let start = Instant::now();
        let data = self.prepare(instances)?;
        let mut decoder_cfg = self.decoder_cfg.clone();
        if decoder_cfg.theta_encoding.is_empty() {
            decoder_cfg.theta_encoding = self.family.theta_encoding.clone();
        }
        let mut weights = init_weights(
            &decoder_cfg,
            self.family.n_agents,
            self.family.dx(),
            self.cfg.rng_seed,
        );
        let mut report = TrainReport::default();

        if let Some(refs) = self.pretrain_refs {
            let taken = pretrain_regression(
                &mut weights,
                &data,
                refs,
                self.cfg.pretrain_steps,
                self.cfg.adam_lr,
            );
            report.pretrain_steps_taken = taken;
            if self.progress {
                println!("pretrain {taken} steps done ({:.1}s)", start.elapsed().as_secs_f64());
            }
        }

        // Adam phase with continuation. Optimizer moments persist across
        // stage boundaries (warm start).
        let mut opt = Adam::new(
            weights.data.len(),
            self.cfg.adam_lr,
            self.cfg.adam_betas,
            self.cfg.adam_eps,
        );
        let mut grad = vec![0.0; weights.data.len()];
        let mut state = self.cfg.anneal.state_at(0);
        for step in 0..self.cfg.adam_steps {
            state = self.cfg.anneal.state_at(step);
            let bp = state.barrier();
            let batch = self.batch_slice(&data, step);
            let l = batch_loss_grad(
                &weights,
                &batch,
                &bp,
                self.cfg.ic_weight,
                self.cfg.tc_weight,
                self.cfg.weight_decay,
                Some(&mut grad),
            );
            self.check_finite(&l, step)?;
            report.max_ic_mismatch = report.max_ic_mismatch.max(l.ic_mean);
            report.max_tc_mismatch = report.max_tc_mismatch.max(l.tc_mean);
            if l.ic_mean >= 1e-16 || l.tc_mean >= 1e-16 {
                return Err(Error::Format(format!(
                    "boundary exactness violated at step {step}: IC {} TC {}",
                    l.ic_mean, l.tc_mean
                )));
            }
            report.losses.push(l.total);
            report.residual_norms.push(l.mean_residual_norm);
            report.barrier_path.push((bp.eps, bp.ell));
            opt.step(&mut weights.data, &grad);
            report.adam_steps_taken += 1;
            if self.progress && (step % 10 == 0 || step + 1 == self.cfg.adam_steps) {
                println!(
                    "adam step {step} loss {:.6e} eps {:.3e} ell {:.3e} elapsed {:.1}s",
                    l.total,
                    bp.eps,
                    bp.ell,
                    start.elapsed().as_secs_f64()
                );
            }
        }

        // Quasi-Newton polish at the final barrier parameters.
        if self.cfg.lbfgs_steps > 0 {
            let bp = state.barrier();
            let eval_log: RefCell<HashMap<u64, f64>> = RefCell::new(HashMap::new());
            let mut closure = |x: &[f64], g: &mut [f64]| -> f64 {
                let mut w = weights.clone();
                w.data.copy_from_slice(x);
                let mut gv = vec![0.0; x.len()];
                let l = batch_loss_grad(
                    &w,
                    &data,
                    &bp,
                    self.cfg.ic_weight,
                    self.cfg.tc_weight,
                    self.cfg.weight_decay,
                    Some(&mut gv),
                );
                g.copy_from_slice(&gv);
                eval_log.borrow_mut().insert(l.total.to_bits(), l.mean_residual_norm);
                l.total
            };
            let out = lbfgs::minimize(
                &mut closure,
                weights.data.clone(),
                self.cfg.lbfgs_steps,
                self.cfg.lbfgs_memory,
            );
            let log = eval_log.into_inner();
            for f in &out.history {
                report.losses.push(*f);
                report
                    .residual_norms
                    .push(*log.get(&f.to_bits()).unwrap_or(&f64::NAN));
                report.barrier_path.push((bp.eps, bp.ell));
            }
            report.lbfgs_steps_taken = out.steps_taken;
            report.line_search_failed = out.line_search_failed;
            weights.data = out.x;
            if self.progress {
                println!(
                    "lbfgs {} steps, final loss {:.6e}, elapsed {:.1}s",
                    out.steps_taken,
                    out.f,
                    start.elapsed().as_secs_f64()
                );
            }
        }

        report.final_eps = state.eps;
        report.final_ell = state.ell;
        report.wall_seconds = start.elapsed().as_secs_f64();
        Ok((weights, report))
    }

    fn check_finite(&self, l: &BatchLoss, step: usize) -> Result<()> {
        if l.total.is_finite() {
            return Ok(());
        }
        let instance = l
            .per_instance_finite
            .iter()
            .position(|ok| !ok)
            .unwrap_or(0);
        Err(Error::NonFiniteLoss { step, instance })
    }
}

/// Adam minimization of the mean squared position mismatch between decoded
/// states and reference positions; costate and velocity channels are left
/// unconstrained. Returns the number of steps taken.
pub fn pretrain_regression(
    weights: &mut DecoderWeights,
    data: &[CollocationData],
    refs: &[ReferenceTrajectory],
    steps: usize,
    lr: f64,
) -> usize {
    assert_eq!(data.len(), refs.len(), "one reference per instance");
    let mut opt = Adam::new(weights.data.len(), lr, (0.9, 0.999), 1e-8);
    let mut grad = vec![0.0; weights.data.len()];
    for _ in 0..steps {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut _lossval = 0.0;
        for (d, r) in data.iter().zip(refs) {
            _lossval += regression_loss_grad(weights, d, r, Some(&mut grad));
        }
        opt.step(&mut weights.data, &grad);
    }
    steps
}

/// Mean squared position mismatch of one instance; optionally accumulates the
/// gradient.
pub fn regression_loss_grad(
    weights: &DecoderWeights,
    data: &CollocationData,
    reference: &ReferenceTrajectory,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let latent = &data.latent;
    let n = latent.half_dim();
    let nt = latent.grid.len();
    let dx = latent.dx;
    let du = dx / 2;
    let horizon = latent.grid.horizon();
    let scale = 1.0 / (nt as f64);
    let base = condition_base(weights, &data.theta);
    let mut acc = grad.as_ref().map(|_| GradAccumulator::new(weights, &base));
    let mut total = 0.0;
    for j in 0..nt {
        let t = latent.grid.times[j];
        let mut z = Vec::with_capacity(2 * n);
        z.extend_from_slice(latent.y_at(j));
        z.extend_from_slice(latent.q_at(j));
        let zdot = vec![0.0; 2 * n];
        let (out, _) = decoder_decode_with(weights, &base, t, horizon, &z, &zdot);
        let mut out_bar = vec![0.0; 2 * n];
        for agent in 0..latent.n_agents {
            for c in 0..du {
                let idx = agent * dx + c;
                let want = reference.positions[(j * latent.n_agents + agent) * du + c];
                let d = out[idx] - want;
                total += scale * d * d;
                out_bar[idx] = 2.0 * scale * d;
            }
        }
        if let Some(acc) = acc.as_mut() {
            let vel_bar = vec![0.0; 2 * n];
            let g = grad.as_deref_mut().expect("buffer");
            acc.point(weights, t, horizon, &z, &zdot, &out_bar, &vel_bar, g);
        }
    }
    if let (Some(acc), Some(g)) = (acc, grad) {
        acc.finish(weights, g);
    }
    total
}

/// Decode the full trajectory of one prepared instance.
pub fn decode_trajectory(weights: &DecoderWeights, data: &CollocationData) -> PhaseTrajectory {
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
        let out = crate::decoder::decoder_forward_with(weights, &base, t, horizon, &z);
        traj.x[j * n..(j + 1) * n].copy_from_slice(&out[..n]);
        traj.p[j * n..(j + 1) * n].copy_from_slice(&out[n..]);
    }
    traj
}

pub struct RefineOutcome {
    pub weights: DecoderWeights,
    pub weight_delta: Vec<f64>,
    pub trajectory: PhaseTrajectory,
    pub line_search_failed: bool,
    pub steps_taken: usize,
}

/// Quasi-Newton minimization of one instance's PMP residual starting from the
/// shared weights; the shared checkpoint is not mutated.
pub fn refine_instance(
    shared: &DecoderWeights,
    data: &CollocationData,
    bp: &BarrierParams,
    max_steps: usize,
) -> RefineOutcome {
    if max_steps == 0 {
        return RefineOutcome {
            weights: shared.clone(),
            weight_delta: vec![0.0; shared.data.len()],
            trajectory: decode_trajectory(shared, data),
            line_search_failed: false,
            steps_taken: 0,
        };
    }
    let batch = std::slice::from_ref(data);
    let mut closure = |x: &[f64], g: &mut [f64]| -> f64 {
        let mut w = shared.clone();
        w.data.copy_from_slice(x);
        let mut gv = vec![0.0; x.len()];
        let l = batch_loss_grad(&w, batch, bp, 0.0, 0.0, 0.0, Some(&mut gv));
        g.copy_from_slice(&gv);
        l.total
    };
    let out = lbfgs::minimize(&mut closure, shared.data.clone(), max_steps, 10);
    let mut refined = shared.clone();
    refined.data = out.x;
    let delta = refined
        .data
        .iter()
        .zip(shared.data.iter())
        .map(|(a, b)| a - b)
        .collect();
    RefineOutcome {
        trajectory: decode_trajectory(&refined, data),
        weights: refined,
        weight_delta: delta,
        line_search_failed: out.line_search_failed,
        steps_taken: out.steps_taken,
    }
}

/// Compare the reverse-mode loss gradient against central finite differences
/// over every weight; returns the max relative error with denominator
/// `max(|g|, 1e-8)`. Uses a small internal collocation grid.
pub fn gradient_check(
    weights: &DecoderWeights,
    inst: &ProblemInstance,
    encoding: &[crate::decoder::ThetaComponent],
    latent_cfg: &LatentConfig,
    bp: &BarrierParams,
) -> Result<f64> {
    let grid = TimeGrid::uniform(inst.horizon, 9);
    let data = prepare_instance(inst, encoding, latent_cfg, None, &grid)?;
    let batch = std::slice::from_ref(&data);
    let mut grad = vec![0.0; weights.data.len()];
    batch_loss_grad(weights, batch, bp, 0.0, 0.0, 0.0, Some(&mut grad));
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for idx in 0..weights.data.len() {
        let mut wp = weights.clone();
        let mut wm = weights.clone();
        wp.data[idx] += h;
        wm.data[idx] -= h;
        let lp = batch_loss_grad(&wp, batch, bp, 0.0, 0.0, 0.0, None).total;
        let lm = batch_loss_grad(&wm, batch, bp, 0.0, 0.0, 0.0, None).total;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (grad[idx] - fd).abs() / grad[idx].abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{Activation, ThetaComponent};
    use crate::scenario::{make_family, sample_instance, FamilyOverrides, Split};

    fn small_decoder_cfg() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            cond_width: 4,
            activation: Activation::Tanh,
            block_diagonal: true,
            theta_encoding: Vec::new(),
        }
    }

    fn two_agent_family() -> crate::scenario::FamilySpec {
        make_family(
            "free",
            2,
            &FamilyOverrides {
                master_seed: Some(7),
                train_count: Some(4),
                test_count: Some(2),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn anneal_schedule_geometric_path() {
        let s = AnnealSchedule::Geometric {
            eps0: 0.1,
            ell0: 0.1,
            rho_eps: 0.6,
            rho_ell: 0.6,
            period_steps: 20,
        };
        let st = s.state_at(60);
        assert_eq!(st.stage, 3);
        assert!((st.eps - 0.1 * 0.6f64.powi(3)).abs() < 1e-15);
        assert!((st.eps - 0.0216).abs() < 1e-12);
        assert!(st.carried);
        assert!(AnnealSchedule::Geometric {
            eps0: 0.1,
            ell0: 0.1,
            rho_eps: 1.2,
            rho_ell: 0.6,
            period_steps: 20
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_step_training_returns_initialization() {
        let family = two_agent_family();
        let cfg = TrainConfig {
            adam_steps: 0,
            lbfgs_steps: 0,
            ..Default::default()
        };
        let dcfg = small_decoder_cfg();
        let trainer = Trainer::new(&family, &cfg, &dcfg, &family.latent);
        let instances = vec![sample_instance(&family, Split::Train, 0).unwrap()];
        let (w, report) = trainer.train(&instances).unwrap();
        let reference = init_weights(
            &DecoderConfig {
                theta_encoding: family.theta_encoding.clone(),
                ..dcfg
            },
            2,
            4,
            cfg.rng_seed,
        );
        assert_eq!(w.data, reference.data);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_mostly_monotone() {
        let family = two_agent_family();
        let cfg = TrainConfig {
            adam_steps: 50,
            lbfgs_steps: 0,
            collocation_count: 16,
            anneal: AnnealSchedule::Fixed { eps: 0.1, ell: 0.1 },
            ..Default::default()
        };
        let dcfg = small_decoder_cfg();
        let trainer = Trainer::new(&family, &cfg, &dcfg, &family.latent);
        let instances: Vec<_> = (0..2)
            .map(|i| sample_instance(&family, Split::Train, i).unwrap())
            .collect();
        let (_, r1) = trainer.train(&instances).unwrap();
        let (_, r2) = trainer.train(&instances).unwrap();
        assert_eq!(r1.losses, r2.losses, "bit-identical reruns");

        let mut violations = 0;
        for w in r1.residual_norms.windows(2) {
            if w[1] > w[0] {
                violations += 1;
            }
        }
        assert!(
            violations <= 5,
            "residual norm should mostly decrease: {violations} increases in {:?}",
            r1.residual_norms
        );
        assert!(r1.max_ic_mismatch < 1e-16);
        assert!(r1.max_tc_mismatch < 1e-16);
    }

    #[test]
    fn pretraining_on_latent_positions_stays_near_zero() {
        let family = two_agent_family();
        let cfg = TrainConfig {
            adam_steps: 0,
            lbfgs_steps: 0,
            collocation_count: 12,
            ..Default::default()
        };
        let dcfg = small_decoder_cfg();
        let trainer = Trainer::new(&family, &cfg, &dcfg, &family.latent);
        let instances = vec![sample_instance(&family, Split::Train, 0).unwrap()];
        let data = trainer.prepare(&instances).unwrap();
        // Reference = the latent positions themselves: the identity-initialized
        // decoder is already optimal.
        let latent = &data[0].latent;
        let du = 2;
        let mut positions = Vec::new();
        for j in 0..latent.grid.len() {
            for agent in 0..latent.n_agents {
                for c in 0..du {
                    positions.push(latent.y_at(j)[agent * latent.dx + c]);
                }
            }
        }
        let refs = vec![ReferenceTrajectory { positions }];
        let mut weights = init_weights(
            &DecoderConfig {
                theta_encoding: family.theta_encoding.clone(),
                ..small_decoder_cfg()
            },
            2,
            4,
            0,
        );
        let before = regression_loss_grad(&weights, &data[0], &refs[0], None);
        assert!(before < 1e-24, "identity decoder already matches: {before}");
        pretrain_regression(&mut weights, &data, &refs, 25, 1e-3);
        let after = regression_loss_grad(&weights, &data[0], &refs[0], None);
        assert!(after < 1e-6, "pretraining must not degrade the match: {after}");
    }

    #[test]
    fn refinement_with_zero_steps_is_identity() {
        let family = two_agent_family();
        let cfg = TrainConfig {
            adam_steps: 0,
            lbfgs_steps: 0,
            collocation_count: 8,
            ..Default::default()
        };
        let dcfg = small_decoder_cfg();
        let trainer = Trainer::new(&family, &cfg, &dcfg, &family.latent);
        let instances = vec![sample_instance(&family, Split::Train, 1).unwrap()];
        let (w, _) = trainer.train(&instances).unwrap();
        let data = trainer.prepare(&instances).unwrap();
        let out = refine_instance(&w, &data[0], &BarrierParams::new(1e-2, 1e-2), 0);
        assert!(out.weight_delta.iter().all(|d| *d == 0.0));
        assert_eq!(out.steps_taken, 0);
    }

    #[test]
    fn gradient_check_small_decoder_passes_and_mutation_fails() {
        let family = make_family(
            "obstacle",
            2,
            &FamilyOverrides {
                master_seed: Some(3),
                train_count: Some(2),
                test_count: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let inst = sample_instance(&family, Split::Train, 0).unwrap();
        let cfg = DecoderConfig {
            layers: 1,
            cond_width: 3,
            activation: Activation::Tanh,
            block_diagonal: true,
            theta_encoding: family.theta_encoding.clone(),
        };
        let mut weights = init_weights(&cfg, 2, 4, 21);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(22);
        for v in &mut weights.data {
            *v = rng.random_range(-0.3..0.3);
        }
        // Moderate barrier sharpness: the FD oracle's truncation error grows
        // with the barrier's third derivative (~1/(eps ell^2)).
        let bp = BarrierParams::new(0.1, 0.1);
        let err = gradient_check(&weights, &inst, &family.theta_encoding, &family.latent, &bp)
            .unwrap();
        assert!(err < 1e-4, "gradient check error {err}");

        // Injected sign flip in the up-shear backward path must be caught.
        crate::decoder::set_upshear_sign_bug(true);
        let err_bug =
            gradient_check(&weights, &inst, &family.theta_encoding, &family.latent, &bp).unwrap();
        crate::decoder::set_upshear_sign_bug(false);
        assert!(err_bug > 1e-1, "mutation must be detected, got {err_bug}");
    }

    #[test]
    fn zero_interaction_identity_is_stationary() {
        // Single agent, no drag, no constraints, latent velocity cost matched
        // to the physical one: the identity operator solves the PMP system, so
        // the initial loss is already at machine-precision zero.
        let mut family = make_family(
            "free",
            1,
            &FamilyOverrides {
                master_seed: Some(5),
                train_count: Some(1),
                test_count: Some(1),
                drag: Some(crate::scenario::DragLaw::None),
                ..Default::default()
            },
        )
        .unwrap();
        family.latent = LatentConfig::lqr(2.0);
        let cfg = TrainConfig {
            adam_steps: 3,
            lbfgs_steps: 0,
            collocation_count: 12,
            anneal: AnnealSchedule::Fixed { eps: 1.0, ell: 0.1 },
            ..Default::default()
        };
        let dcfg = small_decoder_cfg();
        let inst = sample_instance(&family, Split::Train, 0).unwrap();
        let trainer = Trainer::new(&family, &cfg, &dcfg, &family.latent);
        let (_, report) = trainer.train(&[inst]).unwrap();
        assert!(report.losses[0] < 1e-12, "initial loss {}", report.losses[0]);
    }

    #[test]
    fn theta_encoding_defaults_to_family() {
        let family = two_agent_family();
        let cfg = TrainConfig {
            adam_steps: 0,
            lbfgs_steps: 0,
            ..Default::default()
        };
        let dcfg = small_decoder_cfg();
        assert!(dcfg.theta_encoding.is_empty());
        let trainer = Trainer::new(&family, &cfg, &dcfg, &family.latent);
        let instances = vec![sample_instance(&family, Split::Train, 0).unwrap()];
        let (w, _) = trainer.train(&instances).unwrap();
        assert_eq!(w.config.theta_encoding.len(), 1);
        assert!(matches!(
            w.config.theta_encoding[0],
            ThetaComponent::InitialPositions { .. }
        ));
    }
}
