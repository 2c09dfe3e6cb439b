//! The conditional symplectic operator: alternating triangular shears whose
//! parameters are generated from the problem encoding and time by small
//! conditioning networks. Exact JVPs, time derivatives, and reverse-mode
//! parameter gradients are provided for physics-informed training.

pub mod mlp_baseline;
mod net;
mod shear;

pub use shear::{beta, LayerGrads, LayerParams};

use crate::error::{Error, Result};
use crate::phase::ProblemInstance;
use net::{mlp_backward, mlp_forward, mlp_tangent, MlpCache, MlpShape, MlpTangent};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use shear::{shear_stack_apply, shear_stack_backward, ShearSave};

pub const WEIGHTS_VERSION: u32 = 1;

/// Test-only fault injection: flips one sign in the up-shear backward path so
/// that the finite-difference gradient check demonstrably catches it.
#[cfg(test)]
pub(crate) fn set_upshear_sign_bug(on: bool) {
    shear::UPSHEAR_SIGN_BUG.store(on, std::sync::atomic::Ordering::Relaxed);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

/// One component of the flattened conditioning input, with the affine bounds
/// used to map it into `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "component", rename_all = "snake_case")]
pub enum ThetaComponent {
    InitialPositions { lo: f64, hi: f64 },
    AgentRadii { lo: f64, hi: f64 },
    DragCoeffs { lo: f64, hi: f64 },
    ObstacleRadius { index: usize, lo: f64, hi: f64 },
}

impl ThetaComponent {
    pub fn dim(&self, n_agents: usize, spatial_dim: usize) -> usize {
        match self {
            ThetaComponent::InitialPositions { .. } => n_agents * spatial_dim,
            ThetaComponent::AgentRadii { .. } | ThetaComponent::DragCoeffs { .. } => n_agents,
            ThetaComponent::ObstacleRadius { .. } => 1,
        }
    }
}

fn normalize(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (x - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

/// Deterministic flattening of the family-varied instance parameters.
pub fn encode_theta(inst: &ProblemInstance, encoding: &[ThetaComponent]) -> Result<Vec<f64>> {
    let du = inst.dx() / 2;
    let mut out = Vec::new();
    for comp in encoding {
        match comp {
            ThetaComponent::InitialPositions { lo, hi } => {
                for row in &inst.x0 {
                    for c in 0..du {
                        out.push(normalize(row[c], *lo, *hi));
                    }
                }
            }
            ThetaComponent::AgentRadii { lo, hi } => {
                for a in &inst.agents {
                    out.push(normalize(a.radius, *lo, *hi));
                }
            }
            ThetaComponent::DragCoeffs { lo, hi } => {
                for a in &inst.agents {
                    out.push(normalize(a.drag_coeff, *lo, *hi));
                }
            }
            ThetaComponent::ObstacleRadius { index, lo, hi } => {
                match inst.env.obstacles.get(*index) {
                    Some(crate::phase::Obstacle::Circle { radius, .. }) => {
                        out.push(normalize(*radius, *lo, *hi));
                    }
                    _ => {
                        return Err(Error::Mismatch(format!(
                            "theta encoding expects a circle obstacle at index {index}"
                        )))
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn theta_dim(encoding: &[ThetaComponent], n_agents: usize, spatial_dim: usize) -> usize {
    encoding.iter().map(|c| c.dim(n_agents, spatial_dim)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Number of low+up shear pairs.
    pub layers: usize,
    /// Hidden width of the conditioning networks.
    pub cond_width: usize,
    pub activation: Activation,
    pub block_diagonal: bool,
    pub theta_encoding: Vec<ThetaComponent>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 3,
            cond_width: 8,
            activation: Activation::Tanh,
            block_diagonal: true,
            theta_encoding: Vec::new(),
        }
    }
}

/// Parameter layout: per layer [K-trunk | K-heads | b-net | a-net], layers
/// consecutive in one flat buffer.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub layers: usize,
    pub n: usize,
    pub n_blocks: usize,
    pub block: usize,
    pub trunk: MlpShape,
    pub head_params: usize,
    pub bnet: MlpShape,
    pub anet: MlpShape,
    pub per_layer: usize,
}

impl Layout {
    pub fn of(cfg: &DecoderConfig, n_agents: usize, dx: usize, theta_dim: usize) -> Layout {
        let n = n_agents * dx;
        let (n_blocks, block) = if cfg.block_diagonal { (n_agents, dx) } else { (1, n) };
        let cw = cfg.cond_width;
        let trunk = MlpShape { input: theta_dim.max(1), hidden: cw, depth: 2, output: None };
        let head_params = block * block * cw + block * block;
        let bnet = MlpShape { input: theta_dim.max(1), hidden: cw, depth: 2, output: Some(n) };
        let anet = MlpShape { input: theta_dim + 1, hidden: cw, depth: 2, output: Some(n) };
        let per_layer =
            trunk.param_count() + n_blocks * head_params + bnet.param_count() + anet.param_count();
        Layout { layers: cfg.layers, n, n_blocks, block, trunk, head_params, bnet, anet, per_layer }
    }

    pub fn total(&self) -> usize {
        self.layers * self.per_layer
    }

    fn base(&self, layer: usize) -> usize {
        layer * self.per_layer
    }

    pub fn trunk_range(&self, layer: usize) -> std::ops::Range<usize> {
        let b = self.base(layer);
        b..b + self.trunk.param_count()
    }

    pub fn head_range(&self, layer: usize, head: usize) -> std::ops::Range<usize> {
        let b = self.base(layer) + self.trunk.param_count() + head * self.head_params;
        b..b + self.head_params
    }

    pub fn bnet_range(&self, layer: usize) -> std::ops::Range<usize> {
        let b = self.base(layer) + self.trunk.param_count() + self.n_blocks * self.head_params;
        b..b + self.bnet.param_count()
    }

    pub fn anet_range(&self, layer: usize) -> std::ops::Range<usize> {
        let b = self.base(layer)
            + self.trunk.param_count()
            + self.n_blocks * self.head_params
            + self.bnet.param_count();
        b..b + self.anet.param_count()
    }
}

/// All trainable parameters plus the metadata needed to evaluate them.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    pub n_agents: usize,
    pub dx: usize,
    pub theta_dim: usize,
    pub version: u32,
    pub data: Vec<f64>,
}

impl DecoderWeights {
    pub(crate) fn layout(&self) -> Layout {
        Layout::of(&self.config, self.n_agents, self.dx, self.theta_dim)
    }

    pub fn half_dim(&self) -> usize {
        self.n_agents * self.dx
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }
}

/// Exact trainable-parameter count for the configured architecture.
pub fn count_parameters(cfg: &DecoderConfig, n_agents: usize, dx: usize) -> usize {
    let td = theta_dim(&cfg.theta_encoding, n_agents, dx / 2);
    Layout::of(cfg, n_agents, dx, td).total()
}

/// Fan-in-scaled initialization. Conditioning `a`-net output layers start at
/// zero so the decoder is the identity map; `K` and `b` outputs start small
/// but nonzero so the loss has a usable descent direction in `a`.
pub fn init_weights(
    cfg: &DecoderConfig,
    n_agents: usize,
    dx: usize,
    seed: u64,
) -> DecoderWeights {
    let td = theta_dim(&cfg.theta_encoding, n_agents, dx / 2);
    let layout = Layout::of(cfg, n_agents, dx, td);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5157_ab1e);
    let mut data = vec![0.0; layout.total()];

    let fill_mlp = |data: &mut [f64], shape: &MlpShape, rng: &mut ChaCha12Rng, zero_out: bool| {
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
        if let Some(out) = shape.output {
            let s = 1.0 / (fan_in as f64).sqrt();
            for v in &mut data[off..off + out * fan_in + out] {
                *v = if zero_out { 0.0 } else { rng.random_range(-s..s) };
            }
        }
    };

    for l in 0..cfg.layers {
        fill_mlp(&mut data[layout.trunk_range(l)], &layout.trunk, &mut rng, false);
        let s = 1.0 / (cfg.cond_width as f64).sqrt();
        for h in 0..layout.n_blocks {
            for v in &mut data[layout.head_range(l, h)] {
                *v = rng.random_range(-s..s);
            }
        }
        fill_mlp(&mut data[layout.bnet_range(l)], &layout.bnet, &mut rng, false);
        fill_mlp(&mut data[layout.anet_range(l)], &layout.anet, &mut rng, true);
    }

    DecoderWeights {
        config: cfg.clone(),
        n_agents,
        dx,
        theta_dim: td,
        version: WEIGHTS_VERSION,
        data,
    }
}

/// Per-instance conditioning state: everything that depends on theta only.
pub struct CondBase {
    pub theta: Vec<f64>,
    trunk_caches: Vec<MlpCache>,
    bnet_caches: Vec<MlpCache>,
    /// Assembled K and b per layer.
    pub k: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

fn theta_input(theta: &[f64]) -> Vec<f64> {
    if theta.is_empty() {
        vec![0.0]
    } else {
        theta.to_vec()
    }
}

pub fn condition_base(weights: &DecoderWeights, theta: &[f64]) -> CondBase {
    assert_eq!(theta.len(), weights.theta_dim, "theta encoding length mismatch");
    let layout = weights.layout();
    let input = theta_input(theta);
    let mut trunk_caches = Vec::with_capacity(layout.layers);
    let mut bnet_caches = Vec::with_capacity(layout.layers);
    let mut ks = Vec::with_capacity(layout.layers);
    let mut bs = Vec::with_capacity(layout.layers);
    for l in 0..layout.layers {
        let trunk_cache = mlp_forward(&layout.trunk, &weights.data[layout.trunk_range(l)], &input);
        let hidden = trunk_cache.output().to_vec();
        let bd = layout.block;
        let mut k = vec![0.0; layout.n_blocks * bd * bd];
        for hidx in 0..layout.n_blocks {
            let hw = &weights.data[layout.head_range(l, hidx)];
            let (w, c) = hw.split_at(bd * bd * layout.trunk.hidden);
            let kb = &mut k[hidx * bd * bd..(hidx + 1) * bd * bd];
            for r in 0..bd * bd {
                let row = &w[r * layout.trunk.hidden..(r + 1) * layout.trunk.hidden];
                let mut acc = c[r];
                for (wv, hv) in row.iter().zip(hidden.iter()) {
                    acc += wv * hv;
                }
                kb[r] = acc;
            }
        }
        let bnet_cache = mlp_forward(&layout.bnet, &weights.data[layout.bnet_range(l)], &input);
        let b = bnet_cache.output().to_vec();
        trunk_caches.push(trunk_cache);
        bnet_caches.push(bnet_cache);
        ks.push(k);
        bs.push(b);
    }
    CondBase { theta: theta.to_vec(), trunk_caches, bnet_caches, k: ks, b: bs }
}

struct TimeCond {
    caches: Vec<MlpCache>,
    tangents: Vec<MlpTangent>,
}

fn condition_time(
    weights: &DecoderWeights,
    base: &CondBase,
    t: f64,
    with_tangent: bool,
) -> (Vec<LayerParams>, TimeCond) {
    let layout = weights.layout();
    let mut input = base.theta.clone();
    input.push(t);
    let mut tdir = vec![0.0; input.len()];
    *tdir.last_mut().unwrap() = 1.0;
    let mut params = Vec::with_capacity(layout.layers);
    let mut caches = Vec::with_capacity(layout.layers);
    let mut tangents = Vec::with_capacity(layout.layers);
    for l in 0..layout.layers {
        let anet_w = &weights.data[layout.anet_range(l)];
        let cache = mlp_forward(&layout.anet, anet_w, &input);
        let a = cache.output().to_vec();
        let adot = if with_tangent {
            let tan = mlp_tangent(&layout.anet, anet_w, &cache, &tdir);
            let adot = tan.output().to_vec();
            tangents.push(tan);
            adot
        } else {
            vec![0.0; layout.n]
        };
        params.push(LayerParams {
            n_blocks: layout.n_blocks,
            block: layout.block,
            k: base.k[l].clone(),
            b: base.b[l].clone(),
            a,
            adot,
        });
        caches.push(cache);
    }
    (params, TimeCond { caches, tangents })
}

/// Evaluate the conditioning networks at `(theta, t)`.
pub fn condition_params(weights: &DecoderWeights, theta: &[f64], t: f64) -> Vec<LayerParams> {
    let base = condition_base(weights, theta);
    condition_time(weights, &base, t, true).0
}

/// Apply one shear of a layer; exposed for the per-operation contract tests.
pub fn shear_forward(
    z: &[f64],
    layer: &LayerParams,
    t: f64,
    horizon: f64,
    up: bool,
) -> Vec<f64> {
    let n = z.len() / 2;
    let mut out = z.to_vec();
    let (y, q) = out.split_at_mut(n);
    if up {
        let s = shear::sigma_eval(layer, q);
        let bt = beta(t, horizon);
        for i in 0..n {
            y[i] += bt * s[i];
        }
    } else {
        let s = shear::sigma_eval(layer, y);
        for i in 0..n {
            q[i] += s[i];
        }
    }
    out
}

pub fn decoder_forward(
    weights: &DecoderWeights,
    theta: &[f64],
    t: f64,
    horizon: f64,
    z_latent: &[f64],
) -> Vec<f64> {
    let base = condition_base(weights, theta);
    decoder_forward_with(weights, &base, t, horizon, z_latent)
}

/// Forward pass reusing a per-instance conditioning state.
pub fn decoder_forward_with(
    weights: &DecoderWeights,
    base: &CondBase,
    t: f64,
    horizon: f64,
    z_latent: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(z_latent.len(), 2 * weights.half_dim());
    let (params, _) = condition_time(weights, base, t, false);
    let mut z = z_latent.to_vec();
    shear_stack_apply(&params, t, horizon, &mut z, None, None, None);
    z
}

pub fn decoder_jvp(
    weights: &DecoderWeights,
    theta: &[f64],
    t: f64,
    horizon: f64,
    z: &[f64],
    zdot: &[f64],
) -> Vec<f64> {
    let base = condition_base(weights, theta);
    let (params, _) = condition_time(weights, &base, t, false);
    let mut zz = z.to_vec();
    let mut u = zdot.to_vec();
    shear_stack_apply(&params, t, horizon, &mut zz, Some(&mut u), None, None);
    u
}

pub fn decoder_time_derivative(
    weights: &DecoderWeights,
    theta: &[f64],
    t: f64,
    horizon: f64,
    z: &[f64],
) -> Vec<f64> {
    let base = condition_base(weights, theta);
    let (params, _) = condition_time(weights, &base, t, true);
    let mut zz = z.to_vec();
    let mut w = vec![0.0; z.len()];
    shear_stack_apply(&params, t, horizon, &mut zz, None, Some(&mut w), None);
    w
}

/// Forward with all channels at once: returns `(phase, velocity)` where the
/// velocity combines the JVP along `zdot` with the time derivative.
pub fn decoder_decode_with(
    weights: &DecoderWeights,
    base: &CondBase,
    t: f64,
    horizon: f64,
    z: &[f64],
    zdot: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (params, _) = condition_time(weights, base, t, true);
    let mut zz = z.to_vec();
    let mut u = zdot.to_vec();
    let mut w = vec![0.0; z.len()];
    shear_stack_apply(&params, t, horizon, &mut zz, Some(&mut u), Some(&mut w), None);
    for i in 0..u.len() {
        u[i] += w[i];
    }
    (zz, u)
}

/// Adjoints of one collocation point for the parameter gradient: `out_bar` is
/// the loss derivative in the decoded phase point, `vel_bar` in the decoded
/// velocity (the JVP + time-derivative channel).
pub struct PointAdjoint<'a> {
    pub t: f64,
    pub z: &'a [f64],
    pub zdot: &'a [f64],
    pub out_bar: &'a [f64],
    pub vel_bar: &'a [f64],
}

/// Reverse accumulation of the loss gradient over a batch of collocation
/// points sharing one `theta`. Returns a gradient with the weight layout.
pub fn decoder_param_gradient(
    weights: &DecoderWeights,
    theta: &[f64],
    horizon: f64,
    batch: &[PointAdjoint<'_>],
) -> Vec<f64> {
    let mut grad = vec![0.0; weights.data.len()];
    let base = condition_base(weights, theta);
    let mut acc = GradAccumulator::new(weights, &base);
    for pt in batch {
        acc.point(weights, pt.t, horizon, pt.z, pt.zdot, pt.out_bar, pt.vel_bar, &mut grad);
    }
    acc.finish(weights, &mut grad);
    grad
}

/// Streams per-point backward passes and defers the theta-only conditioning
/// backward to the end (K and b do not depend on t, so their adjoints sum
/// across points).
pub struct GradAccumulator<'b> {
    base: &'b CondBase,
    k_bar: Vec<Vec<f64>>,
    b_bar: Vec<Vec<f64>>,
}

impl<'b> GradAccumulator<'b> {
    pub fn new(weights: &DecoderWeights, base: &'b CondBase) -> Self {
        let layout = weights.layout();
        GradAccumulator {
            base,
            k_bar: (0..layout.layers)
                .map(|_| vec![0.0; layout.n_blocks * layout.block * layout.block])
                .collect(),
            b_bar: (0..layout.layers).map(|_| vec![0.0; layout.n]).collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn point(
        &mut self,
        weights: &DecoderWeights,
        t: f64,
        horizon: f64,
        z: &[f64],
        zdot: &[f64],
        out_bar: &[f64],
        vel_bar: &[f64],
        grad: &mut [f64],
    ) {
        let layout = weights.layout();
        let (params, tc) = condition_time(weights, self.base, t, true);
        let mut zz = z.to_vec();
        let mut u = zdot.to_vec();
        let mut w = vec![0.0; z.len()];
        let mut tape: Vec<ShearSave> = Vec::with_capacity(2 * params.len());
        shear_stack_apply(&params, t, horizon, &mut zz, Some(&mut u), Some(&mut w), Some(&mut tape));

        let mut grads: Vec<LayerGrads> = params.iter().map(LayerGrads::zeros).collect();
        let mut zbar = out_bar.to_vec();
        let mut ubar = vel_bar.to_vec();
        let mut wbar = vel_bar.to_vec();
        shear_stack_backward(&params, t, horizon, &tape, &mut zbar, &mut ubar, &mut wbar, &mut grads);

        for l in 0..layout.layers {
            // a-net depends on t: backprop immediately with both a and adot adjoints.
            mlp_backward(
                &layout.anet,
                &weights.data[layout.anet_range(l)],
                &tc.caches[l],
                &grads[l].a,
                &[(&tc.tangents[l], &grads[l].adot)],
                &mut grad[layout.anet_range(l)],
            );
            for (acc, g) in self.k_bar[l].iter_mut().zip(grads[l].k.iter()) {
                *acc += g;
            }
            for (acc, g) in self.b_bar[l].iter_mut().zip(grads[l].b.iter()) {
                *acc += g;
            }
        }
    }

    pub fn finish(self, weights: &DecoderWeights, grad: &mut [f64]) {
        let layout = weights.layout();
        let cw = layout.trunk.hidden;
        for l in 0..layout.layers {
            // Heads: K_block = W_head h + c_head.
            let hidden = self.base.trunk_caches[l].output().to_vec();
            let mut hidden_bar = vec![0.0; cw];
            let bd = layout.block;
            for hidx in 0..layout.n_blocks {
                let range = layout.head_range(l, hidx);
                let kb = &self.k_bar[l][hidx * bd * bd..(hidx + 1) * bd * bd];
                let w_head = weights.data[range.clone()].to_vec();
                let g = &mut grad[range];
                for r in 0..bd * bd {
                    let gr = kb[r];
                    for c in 0..cw {
                        g[r * cw + c] += gr * hidden[c];
                        hidden_bar[c] += w_head[r * cw + c] * gr;
                    }
                    g[bd * bd * cw + r] += gr;
                }
            }
            mlp_backward(
                &layout.trunk,
                &weights.data[layout.trunk_range(l)],
                &self.base.trunk_caches[l],
                &hidden_bar,
                &[],
                &mut grad[layout.trunk_range(l)],
            );
            mlp_backward(
                &layout.bnet,
                &weights.data[layout.bnet_range(l)],
                &self.base.bnet_caches[l],
                &self.b_bar[l],
                &[],
                &mut grad[layout.bnet_range(l)],
            );
        }
    }
}

/// Frobenius defect of the symplectic identity and the determinant defect of
/// the assembled Jacobian at one point.
pub fn symplectic_defect(
    weights: &DecoderWeights,
    theta: &[f64],
    t: f64,
    horizon: f64,
    z: &[f64],
) -> (f64, f64) {
    let dim = z.len();
    let base = condition_base(weights, theta);
    let (params, _) = condition_time(weights, &base, t, false);
    let mut jac = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for col in 0..dim {
        let mut zz = z.to_vec();
        let mut u = vec![0.0; dim];
        u[col] = 1.0;
        shear_stack_apply(&params, t, horizon, &mut zz, Some(&mut u), None, None);
        for row in 0..dim {
            jac[(row, col)] = u[row];
        }
    }
    jacobian_symplectic_defect(&jac)
}

/// Same defect computation for an externally assembled Jacobian.
pub fn jacobian_symplectic_defect(jac: &nalgebra::DMatrix<f64>) -> (f64, f64) {
    let dim = jac.nrows();
    let n = dim / 2;
    let mut j = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for c in 0..n {
        j[(c, n + c)] = 1.0;
        j[(n + c, c)] = -1.0;
    }
    let defect = (jac.transpose() * &j * jac - &j).norm();
    let det = jac.clone().lu().determinant();
    (defect, (det - 1.0).abs())
}
