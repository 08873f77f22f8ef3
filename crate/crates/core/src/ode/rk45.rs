//! Dormand–Prince 5(4) with step-to-time landing on a uniform sample grid.

use crate::{Error, Result};

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
/// Fifth-order solution minus embedded fourth-order solution.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rk45Options {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Rk45Options {
    fn default() -> Self {
        Rk45Options {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 1_000_000,
        }
    }
}

/// States sampled at `times[k] = k · sample_dt`, `times[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Keeps every `stride`-th sample, starting from the initial state.
    pub fn subsample(&self, stride: usize) -> Trajectory {
        Trajectory {
            times: self.times.iter().step_by(stride).copied().collect(),
            states: self.states.iter().step_by(stride).cloned().collect(),
        }
    }
}

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], opts: &Rk45Options) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// Integrates `dy/dt = f(t, y)` from 0 to `t_end`, returning states on the
/// grid `0, sample_dt, 2·sample_dt, …` (up to `t_end`).
pub fn integrate_rk45<F>(
    mut f: F,
    x0: &[f64],
    t_end: f64,
    sample_dt: f64,
    opts: &Rk45Options,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::config("rk45 tolerances must be positive"));
    }
    if !(sample_dt > 0.0 && t_end > 0.0) {
        return Err(Error::config("rk45 needs positive t_end and sample spacing"));
    }
    let n_samples = (t_end / sample_dt + 1e-9).floor() as usize;
    let n = x0.len();
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];

    let mut y = x0.to_vec();
    let mut t = 0.0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    f(t, &y, &mut k[0]);

    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
    let (d0, d1) = (norm(&y), norm(&k[0]));
    let mut h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(sample_dt);
    let h_min = 1e-12 * t_end;
    let mut steps = 0;

    for i in 1..=n_samples {
        let target = i as f64 * sample_dt;
        while target - t > 1e-14 * target.max(1.0) {
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::Integration {
                    step: steps,
                    msg: "rk45 exceeded the step budget".into(),
                });
            }
            let landing = h >= target - t;
            let h_try = if landing { target - t } else { h };

            for s in 1..7 {
                for j in 0..n {
                    let mut acc = y[j];
                    for (l, a) in A[s][..s].iter().enumerate() {
                        acc += h_try * a * k[l][j];
                    }
                    tmp[j] = acc;
                }
                f(t + C[s] * h_try, &tmp, &mut k[s]);
            }
            // Stage 7 was evaluated at the 5th-order solution (FSAL).
            y_new.copy_from_slice(&tmp);
            for j in 0..n {
                err[j] = h_try * (0..7).map(|l| E[l] * k[l][j]).sum::<f64>();
            }
            let e = error_norm(&err, &y, &y_new, opts);
            if !e.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                h = h_try * 0.2;
                if h < h_min {
                    return Err(Error::Integration {
                        step: steps,
                        msg: format!("non-finite state near t = {t:.6}"),
                    });
                }
                continue;
            }
            let fac = if e == 0.0 { 10.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 10.0) };
            if e <= 1.0 {
                t = if landing { target } else { t + h_try };
                std::mem::swap(&mut y, &mut y_new);
                k.swap(0, 6);
                if !landing {
                    h = h_try * fac;
                } else {
                    h = h.max(h_try * fac.min(1.0));
                }
            } else {
                h = h_try * fac.min(1.0);
                if h < h_min {
                    return Err(Error::Integration {
                        step: steps,
                        msg: format!("step size underflow (stiff problem?) at t = {t:.6}"),
                    });
                }
            }
        }
        times.push(target);
        states.push(y.clone());
    }
    Ok(Trajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth_to_tolerance() {
        let opts = Rk45Options {
            rtol: 1e-8,
            atol: 1e-10,
            ..Default::default()
        };
        let tr = integrate_rk45(|_, y, dy| dy[0] = y[0], &[1.0], 1.0, 0.1, &opts).unwrap();
        assert_eq!(tr.states.len(), 11);
        let end = tr.states[10][0];
        assert!((end - std::f64::consts::E).abs() < 1e-7, "{end}");
        assert!((tr.times[10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_field_is_exactly_constant() {
        for rtol in [1e-3, 1e-10] {
            let opts = Rk45Options {
                rtol,
                atol: rtol,
                ..Default::default()
            };
            let tr = integrate_rk45(|_, _, dy| dy.fill(0.0), &[0.7, -2.0], 2.0, 0.02, &opts).unwrap();
            assert!(tr.states.iter().all(|s| s == &[0.7, -2.0]));
        }
    }

    #[test]
    fn damped_pendulum_energy_never_increases() {
        let k = (2.0 * std::f64::consts::PI * 2.0 / 3.0_f64).powi(2);
        let f = |_: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -0.5 * y[1] - k * y[0].sin();
        };
        let tr = integrate_rk45(f, &[1.2, -0.8], 4.0, 0.02, &Rk45Options::default()).unwrap();
        let energy = |s: &[f64]| 0.5 * s[1] * s[1] + k * (1.0 - s[0].cos());
        for w in tr.states.windows(2) {
            assert!(energy(&w[1]) <= energy(&w[0]) + 1e-9);
        }
    }

    #[test]
    fn finite_time_blowup_is_an_error() {
        let opts = Rk45Options::default();
        let res = integrate_rk45(|_, y, dy| dy[0] = y[0] * y[0], &[1.0], 2.0, 0.1, &opts);
        assert!(res.is_err());
    }

    #[test]
    fn rejects_bad_tolerances() {
        let opts = Rk45Options {
            rtol: 0.0,
            ..Default::default()
        };
        assert!(integrate_rk45(|_, _, dy| dy.fill(0.0), &[1.0], 1.0, 0.1, &opts).is_err());
    }
}
