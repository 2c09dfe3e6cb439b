//! Limited-memory BFGS with a strong-Wolfe line search (two-loop recursion,
//! cubic interpolation in the zoom phase).

use std::collections::VecDeque;

pub const WOLFE_C1: f64 = 1e-4;
pub const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH_EVALS: usize = 25;

pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub steps_taken: usize,
    pub line_search_failed: bool,
    /// Loss value after each accepted step.
    pub history: Vec<f64>,
}

struct Memory {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    cap: usize,
}

impl Memory {
    fn new(cap: usize) -> Self {
        Memory {
            s: VecDeque::new(),
            y: VecDeque::new(),
            rho: VecDeque::new(),
            cap,
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let ys = dot(&s, &y);
        if ys <= 1e-14 {
            return; // curvature condition violated; skip the pair
        }
        if self.s.len() == self.cap {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.rho.push_back(1.0 / ys);
        self.s.push_back(s);
        self.y.push_back(y);
    }

    /// Two-loop recursion: r = H grad.
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            axpy(&mut q, -alpha[i], &self.y[i]);
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            axpy(&mut q, alpha[i] - beta, &self.s[i]);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn cubic_interpolate(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let d2sq = d1 * d1 - ga * gb;
    if d2sq >= 0.0 {
        let d2 = d2sq.sqrt() * (b - a).signum();
        let t = b - (b - a) * ((gb + d2 - d1) / (gb - ga + 2.0 * d2));
        if t.is_finite() {
            return t.clamp(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo));
        }
    }
    0.5 * (lo + hi)
}

/// Strong-Wolfe line search along `dir` from `(x0, f0, g0)`. Returns
/// `(alpha, f, grad, evals)` or `None` on failure; `scratch` receives the best
/// point seen either way.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    func: &mut F,
    x0: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    alpha0: f64,
    best: &mut (f64, Vec<f64>),
) -> Option<(f64, f64, Vec<f64>, usize)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dg0 = dot(g0, dir);
    if dg0 >= 0.0 {
        return None;
    }
    let eval = |func: &mut F, alpha: f64, grad: &mut Vec<f64>| -> (f64, f64) {
        let x: Vec<f64> = x0.iter().zip(dir).map(|(xi, di)| xi + alpha * di).collect();
        let f = func(&x, grad);
        let dg = dot(grad, dir);
        (f, dg)
    };

    let mut grad = vec![0.0; x0.len()];
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut dg_prev = dg0;
    let mut alpha = alpha0;
    let mut evals = 0;

    // Bracketing phase.
    let mut bracket = None;
    for _ in 0..MAX_LINE_SEARCH_EVALS {
        let (f, dg) = eval(func, alpha, &mut grad);
        evals += 1;
        if f < best.0 {
            best.0 = f;
            best.1 = x0.iter().zip(dir).map(|(xi, di)| xi + alpha * di).collect();
        }
        if f > f0 + WOLFE_C1 * alpha * dg0 || (evals > 1 && f >= f_prev) {
            bracket = Some((alpha_prev, f_prev, dg_prev, alpha, f, dg));
            break;
        }
        if dg.abs() <= -WOLFE_C2 * dg0 {
            return Some((alpha, f, grad, evals));
        }
        if dg >= 0.0 {
            bracket = Some((alpha, f, dg, alpha_prev, f_prev, dg_prev));
            break;
        }
        alpha_prev = alpha;
        f_prev = f;
        dg_prev = dg;
        alpha *= 2.0;
    }
    let (mut lo, mut flo, mut dglo, mut hi, mut fhi, mut dghi) = bracket?;

    // Zoom phase.
    for _ in evals..MAX_LINE_SEARCH_EVALS {
        let trial = cubic_interpolate(lo, flo, dglo, hi, fhi, dghi);
        let (f, dg) = eval(func, trial, &mut grad);
        evals += 1;
        if f < best.0 {
            best.0 = f;
            best.1 = x0.iter().zip(dir).map(|(xi, di)| xi + trial * di).collect();
        }
        if f > f0 + WOLFE_C1 * trial * dg0 || f >= flo {
            hi = trial;
            fhi = f;
            dghi = dg;
        } else {
            if dg.abs() <= -WOLFE_C2 * dg0 {
                return Some((trial, f, grad, evals));
            }
            if dg * (hi - lo) >= 0.0 {
                hi = lo;
                fhi = flo;
                dghi = dglo;
            }
            lo = trial;
            flo = f;
            dglo = dg;
        }
        if (hi - lo).abs() * dir.iter().map(|d| d.abs()).fold(0.0, f64::max) < 1e-14 {
            break;
        }
    }
    None
}

/// Minimize `func` for at most `max_steps` quasi-Newton iterations.
pub fn minimize<F>(func: &mut F, x0: Vec<f64>, max_steps: usize, memory: usize) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; dim];
    let mut f = func(&x, &mut grad);
    let mut mem = Memory::new(memory);
    let mut best = (f, x.clone());
    let mut history = Vec::with_capacity(max_steps);
    let mut failed = false;
    let mut steps_taken = 0;

    for step in 0..max_steps {
        let gmax = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        if gmax < 1e-12 {
            break;
        }
        let dir = mem.direction(&grad);
        let alpha0 = if step == 0 {
            (1.0 / grad.iter().map(|g| g.abs()).sum::<f64>().max(1e-12)).min(1.0)
        } else {
            1.0
        };
        match strong_wolfe(func, &x, f, &grad, &dir, alpha0, &mut best) {
            Some((alpha, f_new, g_new, _evals)) => {
                let s: Vec<f64> = dir.iter().map(|d| alpha * d).collect();
                let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                mem.push(s.clone(), y);
                axpy(&mut x, alpha, &dir);
                f = f_new;
                grad = g_new;
                steps_taken = step + 1;
                history.push(f);
                if f < best.0 {
                    best = (f, x.clone());
                }
            }
            None => {
                failed = true;
                break;
            }
        }
    }
    if best.0 < f {
        x = best.1;
        f = best.0;
    }
    LbfgsOutcome {
        x,
        f,
        steps_taken,
        line_search_failed: failed,
        history,
    }
}
