//! Adaptive Dormand-Prince 5(4) integration with steps clipped to land on the
//! requested output times.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeTolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeTolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 200_000,
        }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// fifth-order weights equal the last row of A (FSAL)
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B_HAT: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `(t0, y0)` and returns the state at each of
/// the nondecreasing `times` (all `>= t0`).
pub fn integrate<F>(
    f: F,
    t0: f64,
    y0: &[f64],
    times: &[f64],
    tol: OdeTolerances,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < t0) {
        return Err(Error::Domain("output times must be nondecreasing and >= t0".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    f(t, &y, &mut k[0]);
    let span = times.last().map_or(0.0, |te| te - t0);
    let mut h = if span > 0.0 { span * 1e-3 } else { 1e-3 };
    let mut steps = 0;
    let mut out = Vec::with_capacity(times.len());

    for &t_out in times {
        while t < t_out {
            steps += 1;
            if steps > tol.max_steps {
                return Err(Error::Numerical(format!(
                    "ODE step limit {} reached at t = {t}",
                    tol.max_steps
                )));
            }
            let clipped = h >= t_out - t;
            let h_try = if clipped { t_out - t } else { h };
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += A[s][j] * kj[i];
                    }
                    stage[i] = y[i] + h_try * acc;
                }
                f(t + C[s] * h_try, &stage, &mut k[s]);
            }
            // stage holds the fifth-order solution after the last stage
            let mut err = 0.0f64;
            for i in 0..n {
                y_new[i] = stage[i];
                let mut e = 0.0;
                for s in 0..7 {
                    e += (B[s] - B_HAT[s]) * k[s][i];
                }
                let scale = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
                err = err.max((h_try * e / scale).abs());
            }
            if !err.is_finite() {
                h = h_try * 0.1;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::Numerical(format!("ODE state not finite at t = {t}")));
                }
                continue;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 {
                t = if clipped { t_out } else { t + h_try };
                std::mem::swap(&mut y, &mut y_new);
                let last = k.pop().expect("seven stages");
                k.insert(0, last);
                // a clipped step says nothing about the natural step length
                h = if clipped { h.max(h_try * factor) } else { h_try * factor };
            } else {
                h = h_try * factor;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::Numerical(format!("ODE step size underflow at t = {t}")));
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}
