//! Triangular symplectic shears with conditioning-generated parameters.
//!
//! Each layer carries one potential gradient `sigma(v) = K^T (a ⊙ (K v + b))`
//! applied twice: the lower shear shifts the costate by `sigma(y)`, the upper
//! shear shifts the state by `beta(t) sigma(q)` with the boundary-preserving
//! factor `beta(t) = t (T - t)`. Three channels propagate jointly: the phase
//! point, an input tangent (JVP), and the time derivative of the composition.

/// Parameters of one shear pair evaluated at a given `(theta, t)`. `k` holds
/// `n_blocks` square blocks of side `block` (block-diagonal assembly; a single
/// block of side `n` is the dense variant).
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub n_blocks: usize,
    pub block: usize,
    pub k: Vec<f64>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    /// Time derivative of `a` at this `t` (zero when evaluating without the
    /// time channel).
    pub adot: Vec<f64>,
}

impl LayerParams {
    pub fn dim(&self) -> usize {
        self.n_blocks * self.block
    }
}

/// Adjoints of one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub k: Vec<f64>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub adot: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros(params: &LayerParams) -> Self {
        LayerGrads {
            k: vec![0.0; params.k.len()],
            b: vec![0.0; params.b.len()],
            a: vec![0.0; params.a.len()],
            adot: vec![0.0; params.adot.len()],
        }
    }
}

/// out = K v
fn kmatvec(p: &LayerParams, v: &[f64], out: &mut [f64]) {
    let bd = p.block;
    for ib in 0..p.n_blocks {
        let kb = &p.k[ib * bd * bd..(ib + 1) * bd * bd];
        let vb = &v[ib * bd..(ib + 1) * bd];
        let ob = &mut out[ib * bd..(ib + 1) * bd];
        for r in 0..bd {
            let row = &kb[r * bd..(r + 1) * bd];
            let mut acc = 0.0;
            for c in 0..bd {
                acc += row[c] * vb[c];
            }
            ob[r] = acc;
        }
    }
}

/// out = K^T v
fn kmatvec_t(p: &LayerParams, v: &[f64], out: &mut [f64]) {
    let bd = p.block;
    for ib in 0..p.n_blocks {
        let kb = &p.k[ib * bd * bd..(ib + 1) * bd * bd];
        let vb = &v[ib * bd..(ib + 1) * bd];
        let ob = &mut out[ib * bd..(ib + 1) * bd];
        ob.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..bd {
            let row = &kb[r * bd..(r + 1) * bd];
            let vr = vb[r];
            for c in 0..bd {
                ob[c] += row[c] * vr;
            }
        }
    }
}

/// kgrad += block-diagonal restriction of the outer product a b^T
fn kouter_acc(p: &LayerParams, kgrad: &mut [f64], a: &[f64], b: &[f64]) {
    let bd = p.block;
    for ib in 0..p.n_blocks {
        let kb = &mut kgrad[ib * bd * bd..(ib + 1) * bd * bd];
        let ab = &a[ib * bd..(ib + 1) * bd];
        let bb = &b[ib * bd..(ib + 1) * bd];
        for r in 0..bd {
            let row = &mut kb[r * bd..(r + 1) * bd];
            let ar = ab[r];
            for c in 0..bd {
                row[c] += ar * bb[c];
            }
        }
    }
}

/// Quantities saved by one shear application for the backward pass: the
/// sigma-side inputs of each channel and their pre-images under K.
#[derive(Clone, Debug)]
pub struct ShearSave {
    v: Vec<f64>,
    vu: Vec<f64>,
    vw: Vec<f64>,
    g: Vec<f64>,
    gu: Vec<f64>,
    gw: Vec<f64>,
}

pub fn beta(t: f64, horizon: f64) -> f64 {
    t * (horizon - t)
}

pub fn beta_dot(t: f64, horizon: f64) -> f64 {
    horizon - 2.0 * t
}

/// sigma evaluation helper on the primal channel only.
fn sigma(p: &LayerParams, v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
    kmatvec(p, v, scratch);
    for (s, (b, a)) in scratch.iter_mut().zip(p.b.iter().zip(p.a.iter())) {
        *s = a * (*s + b);
    }
    kmatvec_t(p, scratch, out);
}

/// Apply the full stack (low then up per layer) to `z = [y | q]` in place.
/// Optional channels: `u` propagates an input tangent, `w` accumulates the
/// time derivative (seed zero). When `tape` is given, per-shear intermediates
/// are recorded for [`shear_stack_backward`].
pub fn shear_stack_apply(
    layers: &[LayerParams],
    t: f64,
    horizon: f64,
    z: &mut [f64],
    mut u: Option<&mut [f64]>,
    mut w: Option<&mut [f64]>,
    mut tape: Option<&mut Vec<ShearSave>>,
) {
    let n = z.len() / 2;
    let bt = beta(t, horizon);
    let bdot = beta_dot(t, horizon);
    let mut g = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut sig = vec![0.0; n];

    for p in layers {
        debug_assert_eq!(p.dim(), n);
        // ---- lower shear: q += sigma(y) ----
        {
            let (y, q) = z.split_at_mut(n);
            kmatvec(p, y, &mut g);
            for i in 0..n {
                g[i] += p.b[i];
                s[i] = p.a[i] * g[i];
            }
            kmatvec_t(p, &s, &mut sig);
            for i in 0..n {
                q[i] += sig[i];
            }
            let mut save = tape.as_ref().map(|_| ShearSave {
                v: y.to_vec(),
                vu: Vec::new(),
                vw: Vec::new(),
                g: g.clone(),
                gu: Vec::new(),
                gw: Vec::new(),
            });
            if let Some(u) = u.as_deref_mut() {
                let (uy, uq) = u.split_at_mut(n);
                let mut gu = vec![0.0; n];
                kmatvec(p, uy, &mut gu);
                for i in 0..n {
                    s[i] = p.a[i] * gu[i];
                }
                kmatvec_t(p, &s, &mut sig);
                for i in 0..n {
                    uq[i] += sig[i];
                }
                if let Some(sv) = save.as_mut() {
                    sv.vu = uy.to_vec();
                    sv.gu = gu;
                }
            }
            if let Some(w) = w.as_deref_mut() {
                let (wy, wq) = w.split_at_mut(n);
                let mut gw = vec![0.0; n];
                kmatvec(p, wy, &mut gw);
                for i in 0..n {
                    s[i] = p.a[i] * gw[i] + p.adot[i] * g[i];
                }
                kmatvec_t(p, &s, &mut sig);
                for i in 0..n {
                    wq[i] += sig[i];
                }
                if let Some(sv) = save.as_mut() {
                    sv.vw = wy.to_vec();
                    sv.gw = gw;
                }
            }
            if let (Some(tape), Some(sv)) = (tape.as_deref_mut(), save) {
                tape.push(sv);
            }
        }
        // ---- upper shear: y += beta(t) sigma(q) ----
        {
            let (y, q) = z.split_at_mut(n);
            kmatvec(p, q, &mut g);
            for i in 0..n {
                g[i] += p.b[i];
                s[i] = p.a[i] * g[i];
            }
            kmatvec_t(p, &s, &mut sig);
            for i in 0..n {
                y[i] += bt * sig[i];
            }
            let sig_primal = sig.clone();
            let mut save = tape.as_ref().map(|_| ShearSave {
                v: q.to_vec(),
                vu: Vec::new(),
                vw: Vec::new(),
                g: g.clone(),
                gu: Vec::new(),
                gw: Vec::new(),
            });
            if let Some(u) = u.as_deref_mut() {
                let (uy, uq) = u.split_at_mut(n);
                let mut gu = vec![0.0; n];
                kmatvec(p, uq, &mut gu);
                for i in 0..n {
                    s[i] = p.a[i] * gu[i];
                }
                kmatvec_t(p, &s, &mut sig);
                for i in 0..n {
                    uy[i] += bt * sig[i];
                }
                if let Some(sv) = save.as_mut() {
                    sv.vu = uq.to_vec();
                    sv.gu = gu;
                }
            }
            if let Some(w) = w.as_deref_mut() {
                let (wy, wq) = w.split_at_mut(n);
                let mut gw = vec![0.0; n];
                kmatvec(p, wq, &mut gw);
                for i in 0..n {
                    s[i] = p.a[i] * gw[i] + p.adot[i] * g[i];
                }
                kmatvec_t(p, &s, &mut sig);
                for i in 0..n {
                    wy[i] += bt * sig[i] + bdot * sig_primal[i];
                }
                if let Some(sv) = save.as_mut() {
                    sv.vw = wq.to_vec();
                    sv.gw = gw;
                }
            }
            if let (Some(tape), Some(sv)) = (tape.as_deref_mut(), save) {
                tape.push(sv);
            }
        }
    }
}

#[cfg(test)]
pub(crate) static UPSHEAR_SIGN_BUG: std::sync::atomic::AtomicBool =
    std::sync::atomic::AtomicBool::new(false);

#[inline]
fn upshear_sign() -> f64 {
    #[cfg(test)]
    {
        if UPSHEAR_SIGN_BUG.load(std::sync::atomic::Ordering::Relaxed) {
            return -1.0;
        }
    }
    1.0
}

/// One sigma-term backward: given the adjoint `vbar` of `sigma = K^T (a ⊙ (K v
/// + b-part))`, accumulate parameter adjoints and add the input adjoint. The
/// flags select which of (a, b) multiplied the saved pre-image `g`.
#[allow(clippy::too_many_arguments)]
fn sigma_backward(
    p: &LayerParams,
    vbar: &[f64],
    v_in: &[f64],
    g: &[f64],
    with_b: bool,
    weight: &[f64],       // the ⊙ factor applied to g (a or adot)
    weight_grad: &mut [f64],
    b_grad: Option<&mut [f64]>,
    k_grad: &mut [f64],
    in_bar: Option<&mut [f64]>,
    scratch: &mut [f64],
) {
    let n = vbar.len();
    // pre = K vbar
    kmatvec(p, vbar, scratch);
    for i in 0..n {
        weight_grad[i] += g[i] * scratch[i];
    }
    if with_b {
        if let Some(bg) = b_grad {
            for i in 0..n {
                bg[i] += weight[i] * scratch[i];
            }
        }
    }
    // K̂ += (weight ⊙ g) vbar^T + (weight ⊙ pre) v_in^T
    let mut tmp = vec![0.0; n];
    for i in 0..n {
        tmp[i] = weight[i] * g[i];
    }
    kouter_acc(p, k_grad, &tmp, vbar);
    for i in 0..n {
        tmp[i] = weight[i] * scratch[i];
    }
    kouter_acc(p, k_grad, &tmp, v_in);
    // input adjoint: K^T (weight ⊙ K vbar)
    if let Some(ib) = in_bar {
        let mut sig = vec![0.0; n];
        kmatvec_t(p, &tmp, &mut sig);
        for i in 0..n {
            ib[i] += sig[i];
        }
    }
}

/// Reverse pass over the recorded tape. `zbar`, `ubar`, `wbar` enter as the
/// adjoints of the stack outputs and exit as the adjoints of its inputs;
/// parameter adjoints accumulate into `grads` (one entry per layer, shared by
/// the low/up pair).
pub fn shear_stack_backward(
    layers: &[LayerParams],
    t: f64,
    horizon: f64,
    tape: &[ShearSave],
    zbar: &mut [f64],
    ubar: &mut [f64],
    wbar: &mut [f64],
    grads: &mut [LayerGrads],
) {
    let n = zbar.len() / 2;
    let bt = beta(t, horizon) * upshear_sign();
    let bdot = beta_dot(t, horizon);
    let mut scratch = vec![0.0; n];
    debug_assert_eq!(tape.len(), 2 * layers.len());

    for (li, p) in layers.iter().enumerate().rev() {
        let gr = &mut grads[li];

        // ---- upper shear backward ----
        {
            let sv = &tape[2 * li + 1];
            let (ybar_s, qbar_s) = zbar.split_at_mut(n);
            let (uybar, uqbar) = ubar.split_at_mut(n);
            let (wybar, wqbar) = wbar.split_at_mut(n);

            // Primal sigma receives beta*ybar + beta_dot*wybar.
            let vp: Vec<f64> = ybar_s
                .iter()
                .zip(wybar.iter())
                .map(|(yb, wb)| bt * yb + bdot * wb)
                .collect();
            sigma_backward(
                p, &vp, &sv.v, &sv.g, true, &p.a, &mut gr.a, Some(&mut gr.b), &mut gr.k,
                Some(qbar_s), &mut scratch,
            );
            // JVP sigma receives beta*uybar.
            if !sv.vu.is_empty() {
                let vu: Vec<f64> = uybar.iter().map(|x| bt * x).collect();
                sigma_backward(
                    p, &vu, &sv.vu, &sv.gu, false, &p.a, &mut gr.a, None, &mut gr.k,
                    Some(uqbar), &mut scratch,
                );
            }
            // Time sigma receives beta*wybar; its adot ⊙ g part also feeds b and q.
            if !sv.vw.is_empty() {
                let vw: Vec<f64> = wybar.iter().map(|x| bt * x).collect();
                sigma_backward(
                    p, &vw, &sv.vw, &sv.gw, false, &p.a, &mut gr.a, None, &mut gr.k,
                    Some(wqbar), &mut scratch,
                );
                // adot ⊙ g term: same vw adjoint, weight adot, saved g, with b.
                sigma_backward(
                    p, &vw, &sv.v, &sv.g, true, &p.adot, &mut gr.adot, Some(&mut gr.b),
                    &mut gr.k, Some(qbar_s), &mut scratch,
                );
            }
        }

        // ---- lower shear backward ----
        {
            let sv = &tape[2 * li];
            let (ybar_s, qbar_s) = zbar.split_at_mut(n);
            let (uybar, uqbar) = ubar.split_at_mut(n);
            let (wybar, wqbar) = wbar.split_at_mut(n);

            let vp: Vec<f64> = qbar_s.to_vec();
            sigma_backward(
                p, &vp, &sv.v, &sv.g, true, &p.a, &mut gr.a, Some(&mut gr.b), &mut gr.k,
                Some(ybar_s), &mut scratch,
            );
            if !sv.vu.is_empty() {
                sigma_backward(
                    p, uqbar, &sv.vu, &sv.gu, false, &p.a, &mut gr.a, None, &mut gr.k,
                    Some(uybar), &mut scratch,
                );
            }
            if !sv.vw.is_empty() {
                sigma_backward(
                    p, wqbar, &sv.vw, &sv.gw, false, &p.a, &mut gr.a, None, &mut gr.k,
                    Some(wybar), &mut scratch,
                );
                sigma_backward(
                    p, wqbar, &sv.v, &sv.g, true, &p.adot, &mut gr.adot, Some(&mut gr.b),
                    &mut gr.k, Some(ybar_s), &mut scratch,
                );
            }
        }
    }
}

/// Evaluate sigma once; exposed for the hand-worked layer tests.
pub fn sigma_eval(p: &LayerParams, v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    sigma(p, v, &mut out, &mut scratch);
    out
}
