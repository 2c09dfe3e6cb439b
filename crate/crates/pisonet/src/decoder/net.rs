//! Minimal dense network used by the conditioning heads and the ablation
//! baseline: a chain of tanh layers with an optional linear output, stored in
//! one flat parameter slice. Supports forward-mode tangent channels (for the
//! analytic time derivative and input JVPs) and reverse accumulation through
//! both the primal and the tangent computations.

/// Shape of one network. `depth` tanh hidden layers of width `hidden`, then an
/// optional linear output layer; with `output: None` the last hidden
/// activation is the network output (shared-trunk use).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub depth: usize,
    pub output: Option<usize>,
}

impl MlpShape {
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        let mut fan_in = self.input;
        for _ in 0..self.depth {
            count += self.hidden * fan_in + self.hidden;
            fan_in = self.hidden;
        }
        if let Some(out) = self.output {
            count += out * fan_in + out;
        }
        count
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input;
        for _ in 0..self.depth {
            dims.push((self.hidden, fan_in));
            fan_in = self.hidden;
        }
        if let Some(out) = self.output {
            dims.push((out, fan_in));
        }
        dims
    }
}

/// Saved activations of one forward pass. `acts[0]` is the input; one entry
/// per tanh layer follows; `out` is the linear output when present.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub acts: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        if self.out.is_empty() {
            self.acts.last().unwrap()
        } else {
            &self.out
        }
    }
}

/// Saved tangents of one forward-mode pass: `tans[0]` is the input tangent,
/// followed by the post-activation tangent of each hidden layer; `pre` holds
/// the pre-activation tangents `W zdot` needed by the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTangent {
    pub tans: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl MlpTangent {
    pub fn output(&self) -> &[f64] {
        if self.out.is_empty() {
            self.tans.last().unwrap()
        } else {
            &self.out
        }
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let xr = x[r];
        for c in 0..cols {
            out[c] += row[c] * xr;
        }
    }
}

fn outer_acc(grad: &mut [f64], rows: usize, cols: usize, a: &[f64], b: &[f64]) {
    for r in 0..rows {
        let row = &mut grad[r * cols..(r + 1) * cols];
        let ar = a[r];
        for c in 0..cols {
            row[c] += ar * b[c];
        }
    }
}

pub fn mlp_forward(shape: &MlpShape, weights: &[f64], input: &[f64]) -> MlpCache {
    debug_assert_eq!(input.len(), shape.input);
    debug_assert_eq!(weights.len(), shape.param_count());
    let mut acts = Vec::with_capacity(shape.depth + 1);
    acts.push(input.to_vec());
    let mut offset = 0;
    let dims = shape.layer_dims();
    for k in 0..shape.depth {
        let (rows, cols) = dims[k];
        let mut pre = vec![0.0; rows];
        matvec(&weights[offset..offset + rows * cols], rows, cols, acts.last().unwrap(), &mut pre);
        offset += rows * cols;
        for (r, v) in pre.iter_mut().enumerate() {
            *v = (*v + weights[offset + r]).tanh();
        }
        offset += rows;
        acts.push(pre);
    }
    let mut out = Vec::new();
    if let Some(out_dim) = shape.output {
        let cols = if shape.depth == 0 { shape.input } else { shape.hidden };
        out = vec![0.0; out_dim];
        matvec(&weights[offset..offset + out_dim * cols], out_dim, cols, acts.last().unwrap(), &mut out);
        offset += out_dim * cols;
        for (r, v) in out.iter_mut().enumerate() {
            *v += weights[offset + r];
        }
    }
    MlpCache { acts, out }
}

/// Forward-mode pass along `input_tangent`, reusing the primal cache.
pub fn mlp_tangent(
    shape: &MlpShape,
    weights: &[f64],
    cache: &MlpCache,
    input_tangent: &[f64],
) -> MlpTangent {
    let mut tans = Vec::with_capacity(shape.depth + 1);
    let mut pres = Vec::with_capacity(shape.depth);
    tans.push(input_tangent.to_vec());
    let mut offset = 0;
    let dims = shape.layer_dims();
    for k in 0..shape.depth {
        let (rows, cols) = dims[k];
        let mut pre = vec![0.0; rows];
        matvec(&weights[offset..offset + rows * cols], rows, cols, tans.last().unwrap(), &mut pre);
        offset += rows * cols + rows;
        let act = &cache.acts[k + 1];
        let post: Vec<f64> = pre
            .iter()
            .zip(act.iter())
            .map(|(m, z)| (1.0 - z * z) * m)
            .collect();
        pres.push(pre);
        tans.push(post);
    }
    let mut out = Vec::new();
    if let Some(out_dim) = shape.output {
        let cols = if shape.depth == 0 { shape.input } else { shape.hidden };
        out = vec![0.0; out_dim];
        matvec(&weights[offset..offset + out_dim * cols], out_dim, cols, tans.last().unwrap(), &mut out);
    }
    MlpTangent { tans, pre: pres, out }
}

/// Reverse accumulation. `out_bar` is the adjoint of the primal output;
/// `tangent_bars` pairs each tangent channel with the adjoint of its output.
/// Gradients accumulate into `grad` (same layout as `weights`).
pub fn mlp_backward(
    shape: &MlpShape,
    weights: &[f64],
    cache: &MlpCache,
    out_bar: &[f64],
    tangent_bars: &[(&MlpTangent, &[f64])],
    grad: &mut [f64],
) {
    let dims = shape.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for (rows, cols) in &dims {
        offsets.push(off);
        off += rows * cols + rows;
    }

    let last_width = if shape.depth == 0 { shape.input } else { shape.hidden };
    let mut act_bar;
    let mut tan_bars: Vec<Vec<f64>>;
    if let Some(out_dim) = shape.output {
        let o = offsets[shape.depth];
        let w_out = &weights[o..o + out_dim * last_width];
        // out = W z + b
        outer_acc(&mut grad[o..o + out_dim * last_width], out_dim, last_width, out_bar, cache.acts.last().unwrap());
        for r in 0..out_dim {
            grad[o + out_dim * last_width + r] += out_bar[r];
        }
        act_bar = vec![0.0; last_width];
        matvec_t_acc(w_out, out_dim, last_width, out_bar, &mut act_bar);
        // tangent outputs: tout = W ztan
        tan_bars = Vec::with_capacity(tangent_bars.len());
        for (tan, tbar) in tangent_bars {
            outer_acc(&mut grad[o..o + out_dim * last_width], out_dim, last_width, tbar, tan.tans.last().unwrap());
            let mut tb = vec![0.0; last_width];
            matvec_t_acc(w_out, out_dim, last_width, tbar, &mut tb);
            tan_bars.push(tb);
        }
    } else {
        act_bar = out_bar.to_vec();
        tan_bars = tangent_bars.iter().map(|(_, tbar)| tbar.to_vec()).collect();
    }

    for k in (0..shape.depth).rev() {
        let (rows, cols) = dims[k];
        let o = offsets[k];
        let w_k = &weights[o..o + rows * cols];
        let act = &cache.acts[k + 1];

        // Tangent stage: ztan_{k+1} = d ⊙ m, with d = 1 - act².
        let mut next_tan_bars = Vec::with_capacity(tan_bars.len());
        for (ch, (tan, _)) in tangent_bars.iter().enumerate() {
            let tbar = &tan_bars[ch];
            let m = &tan.pre[k];
            let mut m_bar = vec![0.0; rows];
            for r in 0..rows {
                let d = 1.0 - act[r] * act[r];
                m_bar[r] = d * tbar[r];
                // d depends on the primal activation: d̂ = tbar ⊙ m, dd/dz = -2z.
                act_bar[r] += tbar[r] * m[r] * (-2.0 * act[r]);
            }
            outer_acc(&mut grad[o..o + rows * cols], rows, cols, &m_bar, &tan.tans[k]);
            let mut prev = vec![0.0; cols];
            matvec_t_acc(w_k, rows, cols, &m_bar, &mut prev);
            next_tan_bars.push(prev);
        }

        // Primal stage: z_{k+1} = tanh(W z_k + b).
        let mut pre_bar = vec![0.0; rows];
        for r in 0..rows {
            pre_bar[r] = act_bar[r] * (1.0 - act[r] * act[r]);
        }
        outer_acc(&mut grad[o..o + rows * cols], rows, cols, &pre_bar, &cache.acts[k]);
        for r in 0..rows {
            grad[o + rows * cols + r] += pre_bar[r];
        }
        let mut prev = vec![0.0; cols];
        matvec_t_acc(w_k, rows, cols, &pre_bar, &mut prev);
        act_bar = prev;
        tan_bars = next_tan_bars;
    }
}
