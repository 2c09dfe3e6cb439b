//! Pontryagin residual assembly and the composite training loss with its
//! reverse-mode gradient.
//!
//! At each collocation time the decoded point comes from the decoder forward
//! pass, the decoded velocity from the JVP along the exact latent velocity
//! plus the decoder's time derivative. The residuals are
//! `r_x = xdot - grad_p H` and `r_p = pdot + grad_x H`; their squared norms
//! average over the batch and the grid.

use crate::decoder::{
    condition_base, decoder_decode_with, encode_theta, DecoderWeights, GradAccumulator,
    ThetaComponent,
};
use crate::error::Result;
use crate::hamiltonian::{hamiltonian_grads, hamiltonian_hvp, BarrierParams};
use crate::latent::{compose_pretrained, solve_latent_bvp, ComposedMap, LatentConfig, LatentVariant};
use crate::phase::{LatentTrajectory, ProblemInstance, TimeGrid};

/// One instance prepared for training: the conditioning vector and the latent
/// trajectory on the collocation grid.
#[derive(Clone, Debug)]
pub struct CollocationData {
    pub inst: ProblemInstance,
    pub theta: Vec<f64>,
    pub latent: LatentTrajectory,
}

pub fn prepare_instance(
    inst: &ProblemInstance,
    encoding: &[ThetaComponent],
    latent_cfg: &LatentConfig,
    composed: Option<&ComposedMap>,
    grid: &TimeGrid,
) -> Result<CollocationData> {
    let theta = encode_theta(inst, encoding)?;
    let mut latent = solve_latent_bvp(inst, latent_cfg, grid)?;
    if matches!(latent_cfg.variant, LatentVariant::LqrComposed) {
        if let Some(map) = composed {
            latent = compose_pretrained(&latent, map);
        }
    }
    Ok(CollocationData {
        inst: inst.clone(),
        theta,
        latent,
    })
}

/// Residual arrays over the collocation grid, one row of `n` per sample.
pub fn pmp_residuals(
    inst: &ProblemInstance,
    weights: &DecoderWeights,
    theta: &[f64],
    latent: &LatentTrajectory,
    bp: &BarrierParams,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = latent.half_dim();
    let horizon = latent.grid.horizon();
    let base = condition_base(weights, theta);
    let mut rx = Vec::with_capacity(latent.grid.len());
    let mut rp = Vec::with_capacity(latent.grid.len());
    for j in 0..latent.grid.len() {
        let t = latent.grid.times[j];
        let (z, zdot) = point_inputs(latent, j);
        let (out, vel) = decoder_decode_with(weights, &base, t, horizon, &z, &zdot);
        let (gx, gp) = hamiltonian_grads(inst, &out[..n], &out[n..], bp);
        let mut rx_j = vec![0.0; n];
        let mut rp_j = vec![0.0; n];
        for c in 0..n {
            rx_j[c] = vel[c] - gp[c];
            rp_j[c] = vel[n + c] + gx[c];
        }
        rx.push(rx_j);
        rp.push(rp_j);
    }
    (rx, rp)
}

fn point_inputs(latent: &LatentTrajectory, j: usize) -> (Vec<f64>, Vec<f64>) {
    let n = latent.half_dim();
    let mut z = Vec::with_capacity(2 * n);
    z.extend_from_slice(latent.y_at(j));
    z.extend_from_slice(latent.q_at(j));
    let mut zdot = Vec::with_capacity(2 * n);
    zdot.extend_from_slice(latent.ydot_at(j));
    zdot.extend_from_slice(latent.qdot_at(j));
    (z, zdot)
}

/// Per-instance contributions: summed squared residuals, boundary mismatches,
/// and the mean per-sample residual norm.
#[derive(Clone, Copy, Debug, Default)]
pub struct InstanceLoss {
    pub residual_sq: f64,
    pub ic_sq: f64,
    pub tc_sq: f64,
    pub mean_residual_norm: f64,
}

/// Evaluate one instance's loss parts and optionally accumulate the weight
/// gradient of `scale * sum_j (|r_x|^2 + |r_p|^2)` (plus the boundary terms
/// weighted by `ic_weight`/`tc_weight` and `bc_scale`).
#[allow(clippy::too_many_arguments)]
pub fn instance_loss_grad(
    weights: &DecoderWeights,
    data: &CollocationData,
    bp: &BarrierParams,
    scale: f64,
    ic_weight: f64,
    tc_weight: f64,
    bc_scale: f64,
    mut grad: Option<&mut [f64]>,
) -> InstanceLoss {
    let latent = &data.latent;
    let inst = &data.inst;
    let n = latent.half_dim();
    let nt = latent.grid.len();
    let horizon = latent.grid.horizon();
    let base = condition_base(weights, &data.theta);
    let mut acc = grad
        .as_ref()
        .map(|_| GradAccumulator::new(weights, &base));

    let mut residual_sq = 0.0;
    let mut norm_sum = 0.0;
    let mut ic_sq = 0.0;
    let mut tc_sq = 0.0;

    let x0 = inst.x0_flat();
    let xt = inst.xt_flat();

    for j in 0..nt {
        let t = latent.grid.times[j];
        let (z, zdot) = point_inputs(latent, j);
        let (out, vel) = decoder_decode_with(weights, &base, t, horizon, &z, &zdot);
        let (gx, gp) = hamiltonian_grads(inst, &out[..n], &out[n..], bp);
        let mut rx = vec![0.0; n];
        let mut rp = vec![0.0; n];
        let mut point_sq = 0.0;
        for c in 0..n {
            rx[c] = vel[c] - gp[c];
            rp[c] = vel[n + c] + gx[c];
            point_sq += rx[c] * rx[c] + rp[c] * rp[c];
        }
        residual_sq += point_sq;
        norm_sum += point_sq.sqrt();

        let mut bc_bar: Option<Vec<f64>> = None;
        if j == 0 && ic_weight != 0.0 {
            let mut bar = vec![0.0; 2 * n];
            for c in 0..n {
                let d = out[c] - x0[c];
                ic_sq += d * d;
                bar[c] = 2.0 * ic_weight * bc_scale * d;
            }
            bc_bar = Some(bar);
        } else if j == 0 {
            for c in 0..n {
                let d = out[c] - x0[c];
                ic_sq += d * d;
            }
        }
        if j == nt - 1 {
            let mut bar = bc_bar.take().unwrap_or_else(|| vec![0.0; 2 * n]);
            for c in 0..n {
                let d = out[c] - xt[c];
                tc_sq += d * d;
                if tc_weight != 0.0 {
                    bar[c] += 2.0 * tc_weight * bc_scale * d;
                }
            }
            bc_bar = Some(bar);
        }

        if let Some(acc) = acc.as_mut() {
            // d loss / d out via the Hamiltonian Hessian: 2 * Hess * (rp, -rx).
            let neg_rx: Vec<f64> = rx.iter().map(|v| -v).collect();
            let (hx, hp) = hamiltonian_hvp(inst, &out[..n], &out[n..], bp, &rp, &neg_rx);
            let mut out_bar = vec![0.0; 2 * n];
            let mut vel_bar = vec![0.0; 2 * n];
            for c in 0..n {
                out_bar[c] = 2.0 * scale * hx[c];
                out_bar[n + c] = 2.0 * scale * hp[c];
                vel_bar[c] = 2.0 * scale * rx[c];
                vel_bar[n + c] = 2.0 * scale * rp[c];
            }
            if let Some(bar) = bc_bar {
                for c in 0..2 * n {
                    out_bar[c] += bar[c];
                }
            }
            let g = grad.as_deref_mut().expect("gradient buffer");
            acc.point(weights, t, horizon, &z, &zdot, &out_bar, &vel_bar, g);
        }
    }

    if let (Some(acc), Some(g)) = (acc, grad) {
        acc.finish(weights, g);
    }

    InstanceLoss {
        residual_sq,
        ic_sq,
        tc_sq,
        mean_residual_norm: norm_sum / nt as f64,
    }
}

/// Composite loss over a batch, with optional gradient. Mean normalization is
/// `1/(|B| * Nt)` for the residual part and `1/|B|` for the boundary terms;
/// weight decay adds `lambda * |w|^2`.
pub struct BatchLoss {
    pub total: f64,
    pub residual_mean: f64,
    pub ic_mean: f64,
    pub tc_mean: f64,
    pub mean_residual_norm: f64,
    pub per_instance_finite: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_loss_grad(
    weights: &DecoderWeights,
    batch: &[CollocationData],
    bp: &BarrierParams,
    ic_weight: f64,
    tc_weight: f64,
    weight_decay: f64,
    grad: Option<&mut Vec<f64>>,
) -> BatchLoss {
    use rayon::prelude::*;
    let b = batch.len().max(1);
    let nt = batch.first().map_or(1, |d| d.latent.grid.len());
    let scale = 1.0 / (b as f64 * nt as f64);
    let bc_scale = 1.0 / b as f64;
    let want_grad = grad.is_some();

    let results: Vec<(InstanceLoss, Option<Vec<f64>>)> = batch
        .par_iter()
        .map(|data| {
            let mut g = want_grad.then(|| vec![0.0; weights.data.len()]);
            let parts = instance_loss_grad(
                weights,
                data,
                bp,
                scale,
                ic_weight,
                tc_weight,
                bc_scale,
                g.as_deref_mut(),
            );
            (parts, g)
        })
        .collect();

    let mut residual = 0.0;
    let mut ic = 0.0;
    let mut tc = 0.0;
    let mut norm = 0.0;
    let mut finite = Vec::with_capacity(b);
    if let Some(gout) = grad {
        gout.iter_mut().for_each(|v| *v = 0.0);
        // Fixed reduction order: instance index.
        for (_, g) in &results {
            if let Some(g) = g {
                for (o, v) in gout.iter_mut().zip(g.iter()) {
                    *o += v;
                }
            }
        }
        for (i, (w, g)) in weights.data.iter().zip(gout.iter_mut()).enumerate() {
            let _ = i;
            *g += 2.0 * weight_decay * w;
        }
    }
    for (parts, _) in &results {
        residual += parts.residual_sq;
        ic += parts.ic_sq;
        tc += parts.tc_sq;
        norm += parts.mean_residual_norm;
        finite.push(parts.residual_sq.is_finite());
    }
    let wd: f64 = weights.data.iter().map(|w| w * w).sum::<f64>() * weight_decay;
    let residual_mean = residual * scale;
    let ic_mean = ic * bc_scale;
    let tc_mean = tc * bc_scale;
    BatchLoss {
        total: residual_mean + ic_weight * ic_mean + tc_weight * tc_mean + wd,
        residual_mean,
        ic_mean,
        tc_mean,
        mean_residual_norm: norm / b as f64,
        per_instance_finite: finite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{init_weights, Activation, DecoderConfig};
    use crate::phase::{AgentSpec, CostSpec, EnvironmentSpec, Obstacle};

    fn single_agent_instance(c_v: f64) -> ProblemInstance {
        ProblemInstance {
            family_id: "zero-interaction".into(),
            agents: vec![AgentSpec::new(0.02, 0.0, 4)],
            env: EnvironmentSpec::free(2, 1.0),
            x0: vec![vec![-0.5, -0.2, 0.0, 0.0]],
            x_t: vec![vec![0.5, 0.3, 0.0, 0.0]],
            horizon: 1.0,
            seed: 0,
            cost: CostSpec {
                velocity_weight: c_v,
                control_weight: 1.0,
            },
        }
    }

    fn decoder_cfg() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            cond_width: 4,
            activation: Activation::Tanh,
            block_diagonal: true,
            theta_encoding: vec![crate::decoder::ThetaComponent::InitialPositions {
                lo: -1.0,
                hi: 1.0,
            }],
        }
    }

    #[test]
    fn zero_interaction_identity_operator_has_tiny_residuals() {
        // With k = 0, no constraints, and the latent velocity cost matched to
        // the physical one (C_Q = 2 c_v), the latent system IS the physical
        // PMP system, so the identity decoder solves it exactly.
        let inst = single_agent_instance(1.0);
        let cfg = decoder_cfg();
        let weights = init_weights(&cfg, 1, 4, 7);
        let grid = TimeGrid::uniform(1.0, 33);
        let data = prepare_instance(
            &inst,
            &cfg.theta_encoding,
            &LatentConfig::lqr(2.0),
            None,
            &grid,
        )
        .unwrap();
        let bp = BarrierParams::new(1.0, 0.1);
        let (rx, rp) = pmp_residuals(&inst, &weights, &data.theta, &data.latent, &bp);
        for j in 0..grid.len() {
            for c in 0..4 {
                assert!(rx[j][c].abs() < 1e-8, "rx[{j}][{c}] = {}", rx[j][c]);
                assert!(rp[j][c].abs() < 1e-8, "rp[{j}][{c}] = {}", rp[j][c]);
            }
        }
    }

    #[test]
    fn costate_residual_carries_barrier_gradient_near_obstacle() {
        let mut inst = single_agent_instance(1.0);
        inst.env.obstacles.push(Obstacle::Circle {
            center: vec![0.0, 0.0],
            radius: 0.15,
        });
        let cfg = decoder_cfg();
        let weights = init_weights(&cfg, 1, 4, 3);
        let grid = TimeGrid::uniform(1.0, 17);
        let data = prepare_instance(
            &inst,
            &cfg.theta_encoding,
            &LatentConfig::lqr(2.0),
            None,
            &grid,
        )
        .unwrap();
        // Soft barrier with long range so the straight path feels it.
        let bp = BarrierParams::new(0.1, 0.2);
        let (_, rp) = pmp_residuals(&inst, &weights, &data.theta, &data.latent, &bp);
        // Compare against the direct Hamiltonian gradient at the midpoint.
        let j = grid.len() / 2;
        let z: Vec<f64> = data.latent.y_at(j).to_vec();
        let q: Vec<f64> = data.latent.q_at(j).to_vec();
        let (gx, _) = hamiltonian_grads(&inst, &z, &q, &bp);
        // qdot for the latent system has no barrier knowledge; the residual
        // must contain exactly the barrier part of gx in its position block.
        let mut found = false;
        for c in 0..2 {
            if gx[c].abs() > 1e-3 {
                found = true;
                assert!(
                    (rp[j][c] - (data.latent.qdot_at(j)[c] + gx[c])).abs() < 1e-12,
                    "residual must equal qdot + grad_x H"
                );
            }
        }
        assert!(found, "barrier gradient should be active near the obstacle");
    }

    #[test]
    fn batch_loss_permutation_and_duplication_invariance() {
        let cfg = decoder_cfg();
        let mut inst = single_agent_instance(1.0);
        // Promote to two identical agents placed symmetrically.
        inst.agents.push(AgentSpec::new(0.02, 0.0, 4));
        inst.x0 = vec![vec![-0.5, 0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0, 0.0]];
        inst.x_t = vec![vec![0.5, 0.0, 0.0, 0.0], vec![-0.5, 0.0, 0.0, 0.0]];
        let mut swapped = inst.clone();
        swapped.x0.swap(0, 1);
        swapped.x_t.swap(0, 1);

        let weights = init_weights(&cfg, 2, 4, 11);
        let grid = TimeGrid::uniform(1.0, 9);
        let bp = BarrierParams::new(0.1, 0.1);
        let lat = LatentConfig::lqr_rotation(0.1, 1.0);
        let d1 = prepare_instance(&inst, &cfg.theta_encoding, &lat, None, &grid).unwrap();
        let d2 = prepare_instance(&swapped, &cfg.theta_encoding, &lat, None, &grid).unwrap();

        let l1 = batch_loss_grad(&weights, &[d1.clone()], &bp, 0.0, 0.0, 0.0, None);
        // Identical agents: permuting them changes theta ordering, but the
        // physical loss of the permuted instance matches.
        let l2 = batch_loss_grad(&weights, &[d2], &bp, 0.0, 0.0, 0.0, None);
        assert!(
            (l1.total - l2.total).abs() < 1e-9,
            "{} vs {}",
            l1.total,
            l2.total
        );

        let l3 = batch_loss_grad(&weights, &[d1.clone(), d1], &bp, 0.0, 0.0, 0.0, None);
        assert!((l1.total - l3.total).abs() < 1e-12, "duplication changes mean");
    }

    #[test]
    fn boundary_mismatches_are_exactly_zero() {
        let inst = single_agent_instance(0.5);
        let cfg = decoder_cfg();
        let mut weights = init_weights(&cfg, 1, 4, 5);
        // Randomize everything, including the a-net outputs.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(6);
        for v in &mut weights.data {
            *v = rng.random_range(-0.5..0.5);
        }
        let grid = TimeGrid::uniform(1.0, 9);
        let data = prepare_instance(
            &inst,
            &cfg.theta_encoding,
            &LatentConfig::lqr(1.0),
            None,
            &grid,
        )
        .unwrap();
        let bp = BarrierParams::new(0.1, 0.1);
        let l = batch_loss_grad(&weights, &[data], &bp, 1.0, 1.0, 0.0, None);
        assert!(l.ic_mean < 1e-16, "IC mismatch {}", l.ic_mean);
        assert!(l.tc_mean < 1e-16, "TC mismatch {}", l.tc_mean);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut inst = single_agent_instance(1.0);
        inst.env.obstacles.push(Obstacle::Circle {
            center: vec![0.0, 0.0],
            radius: 0.15,
        });
        let cfg = DecoderConfig {
            layers: 1,
            cond_width: 2,
            activation: Activation::Tanh,
            block_diagonal: true,
            theta_encoding: vec![crate::decoder::ThetaComponent::InitialPositions {
                lo: -1.0,
                hi: 1.0,
            }],
        };
        let mut weights = init_weights(&cfg, 1, 4, 9);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(10);
        for v in &mut weights.data {
            *v = rng.random_range(-0.4..0.4);
        }
        let grid = TimeGrid::uniform(1.0, 7);
        let data = prepare_instance(
            &inst,
            &cfg.theta_encoding,
            &LatentConfig::lqr(1.0),
            None,
            &grid,
        )
        .unwrap();
        let bp = BarrierParams::new(0.1, 0.1);
        let mut grad = vec![0.0; weights.data.len()];
        let l0 = batch_loss_grad(
            &weights,
            std::slice::from_ref(&data),
            &bp,
            0.7,
            0.3,
            1e-3,
            Some(&mut grad),
        );
        assert!(l0.total.is_finite());
        let h = 1e-6;
        for idx in 0..weights.data.len() {
            let mut wp = weights.clone();
            let mut wm = weights.clone();
            wp.data[idx] += h;
            wm.data[idx] -= h;
            let lp = batch_loss_grad(&wp, std::slice::from_ref(&data), &bp, 0.7, 0.3, 1e-3, None);
            let lm = batch_loss_grad(&wm, std::slice::from_ref(&data), &bp, 0.7, 0.3, 1e-3, None);
            let fd = (lp.total - lm.total) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "weight {idx}: {} vs fd {fd}", grad[idx]);
        }
    }
}
