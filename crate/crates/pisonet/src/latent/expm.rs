//! Dense matrix exponential by scaling and squaring with Padé approximants,
//! following the Higham (2005) order selection. The per-agent Hamiltonian
//! blocks here are at most 12 x 12, so the dense algorithm is more than
//! adequate.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Low-order Padé: U = A * sum(b_odd A^{2k}), V = sum(b_even A^{2k}).
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a2 = a * a;
    let ident = DMatrix::identity(n, n);
    let mut u_inner = &ident * b[1];
    let mut v = &ident * b[0];
    let mut pow = ident;
    let mut k = 2;
    while k < b.len() {
        pow = &pow * &a2;
        v += &pow * b[k];
        if k + 1 < b.len() {
            u_inner += &pow * b[k + 1];
        }
        k += 2;
    }
    (a * u_inner, v)
}

fn pade_13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let b = &B13;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u = a * (&a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1]);
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    (u, v)
}

/// `exp(t * m)`.
pub fn matrix_exponential(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !t.is_finite() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMatrix);
    }
    let a = m * t;
    let norm = one_norm(&a);
    let (u, v, squarings) = if norm <= THETA_3 {
        let (u, v) = pade_low(&a, &B3);
        (u, v, 0)
    } else if norm <= THETA_5 {
        let (u, v) = pade_low(&a, &B5);
        (u, v, 0)
    } else if norm <= THETA_7 {
        let (u, v) = pade_low(&a, &B7);
        (u, v, 0)
    } else if norm <= THETA_9 {
        let (u, v) = pade_low(&a, &B9);
        (u, v, 0)
    } else {
        let s = ((norm / THETA_13).log2().ceil() as i32).max(0) as u32;
        let scaled = &a * 0.5f64.powi(s as i32);
        let (u, v) = pade_13(&scaled);
        (u, v, s)
    };
    let num = &v + &u;
    let den = &v - &u;
    let mut result = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::Format("Padé denominator singular".into()))?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rk4_expm(m: &DMatrix<f64>, t: f64, dt: f64) -> DMatrix<f64> {
        let n = m.nrows();
        let mut phi = DMatrix::<f64>::identity(n, n);
        let steps = (t / dt).round() as usize;
        let h = t / steps as f64;
        for _ in 0..steps {
            let k1 = m * &phi;
            let k2 = m * (&phi + &k1 * (h / 2.0));
            let k3 = m * (&phi + &k2 * (h / 2.0));
            let k4 = m * (&phi + &k3 * h);
            phi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        phi
    }

    #[test]
    fn zero_time_is_identity() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let e = matrix_exponential(&m, 0.0).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn planar_rotation_closed_form() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = matrix_exponential(&m, std::f64::consts::FRAC_PI_2).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((e - expected).norm() < 1e-14);
    }

    #[test]
    fn nilpotent_series_terminates() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exponential(&m, 2.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!((e - expected).norm() < 1e-14);
    }

    #[test]
    fn matches_rk4_propagation_on_hamiltonian_block() {
        // An 8x8 block of the kind produced by the latent solver.
        let mut m = DMatrix::zeros(8, 8);
        for c in 0..2 {
            m[(c, 2 + c)] = 1.0; // dw/dt = v
            m[(2 + c, 4 + 2 + c)] = 0.5; // dv/dt = C q_v
            m[(4 + 2 + c, 2 + c)] = -1.0; // dq_v/dt picks up Q and -A^T
            m[(4 + 2 + c, 4 + c)] = -1.0;
        }
        m[(2, 3)] = -0.15;
        m[(3, 2)] = 0.15;
        let e = matrix_exponential(&m, 1.0).unwrap();
        let r = rk4_expm(&m, 1.0, 1e-5);
        let rel = (&e - &r).norm() / r.norm();
        assert!(rel < 1e-9, "relative error {rel}");
    }

    #[test]
    fn rejects_non_finite() {
        let m = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matrix_exponential(&m, 1.0).is_err());
    }

    #[test]
    fn large_norm_uses_squaring_accurately() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -20.0, 20.0, 0.0]);
        let e = matrix_exponential(&m, 1.0).unwrap();
        let c = (20.0f64).cos();
        let s = (20.0f64).sin();
        let expected = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!((e - expected).norm() < 1e-12);
    }
}
