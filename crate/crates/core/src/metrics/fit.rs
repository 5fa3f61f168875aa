//! Axis-aligned 2-D Gaussian fit by Levenberg-Marquardt.
//!
//! Model: `A * exp(-((x - mx)^2 / (2 sx^2) + (y - my)^2 / (2 sy^2))) + c`
//! with `x` the column and `y` the row coordinate in pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

pub const MAX_ITERATIONS: usize = 200;
pub const REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gauss2DFit {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub mu_x: f64,
    pub mu_y: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub r2: f64,
    pub iterations: usize,
    pub converged: bool,
}

// Parameter vector layout.
const A: usize = 0;
const MX: usize = 1;
const MY: usize = 2;
const SX: usize = 3;
const SY: usize = 4;
const C: usize = 5;

pub fn fit_gaussian(field: &Field) -> Result<Gauss2DFit> {
    fit_gaussian_at(field, [0.0, 0.0])
}

/// Fit with pixel `(row 0, col 0)` placed at `origin = [x0, y0]`.
pub fn fit_gaussian_at(field: &Field, origin: [f64; 2]) -> Result<Gauss2DFit> {
    let (h, w) = (field.height(), field.width());
    let mean = field.sum() / (h * w) as f64;
    let ss_tot: f64 = field.data().iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 || !ss_tot.is_finite() {
        return Err(Error::Numeric("zero variance, fit undefined".into()));
    }
    let mut distinct: Vec<f64> = field.data().to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 6 {
        return Err(Error::Numeric(format!("only {} distinct values; 6 parameters need at least 6", distinct.len())));
    }

    // Conditioning: fit the field scaled to unit peak, undo afterwards.
    let scale = field.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let z: Vec<f64> = field.data().iter().map(|v| v / scale).collect();
    let xs: Vec<f64> = (0..w).map(|x| origin[0] + x as f64).collect();
    let ys: Vec<f64> = (0..h).map(|y| origin[1] + y as f64).collect();

    let mut p = moment_guess(&z, &xs, &ys);
    let mut cost = cost_of(&p, &z, &xs, &ys);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&p, &z, &xs, &ys);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut m = jtj;
            for i in 0..6 {
                m[i][i] += lambda * jtj[i][i].max(1e-12);
            }
            let Some(delta) = solve6(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p;
            for i in 0..6 {
                trial[i] += delta[i];
            }
            let trial_cost = cost_of(&trial, &z, &xs, &ys);
            if trial_cost.is_finite() && trial_cost <= cost {
                let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                p = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < REL_TOL || cost < 1e-28 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        // No downhill step at any damping: at a minimum to working precision.
        if !accepted {
            converged = true;
        }
        if converged {
            break;
        }
    }

    let fitted_ss_res: f64 = residual_sum(&p, &z, &xs, &ys) * scale * scale;
    Ok(Gauss2DFit {
        sigma_x: p[SX].abs(),
        sigma_y: p[SY].abs(),
        mu_x: p[MX],
        mu_y: p[MY],
        amplitude: p[A] * scale,
        offset: p[C] * scale,
        r2: 1.0 - fitted_ss_res / ss_tot,
        iterations,
        converged,
    })
}

fn moment_guess(z: &[f64], xs: &[f64], ys: &[f64]) -> [f64; 6] {
    let w = xs.len();
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in z.iter().enumerate() {
        let wt = v - min;
        s += wt;
        sx += wt * xs[i % w];
        sy += wt * ys[i / w];
    }
    let (mx, my) = (sx / s, sy / s);
    let (mut vx, mut vy) = (0.0, 0.0);
    for (i, &v) in z.iter().enumerate() {
        let wt = v - min;
        vx += wt * (xs[i % w] - mx).powi(2);
        vy += wt * (ys[i / w] - my).powi(2);
    }
    let mut p = [0.0; 6];
    p[A] = max - min;
    p[MX] = mx;
    p[MY] = my;
    p[SX] = (vx / s).sqrt().max(0.5);
    p[SY] = (vy / s).sqrt().max(0.5);
    p[C] = min;
    p
}

#[inline]
fn model_and_grad(p: &[f64; 6], x: f64, y: f64) -> (f64, [f64; 6]) {
    let dx = x - p[MX];
    let dy = y - p[MY];
    let (sx2, sy2) = (p[SX] * p[SX], p[SY] * p[SY]);
    let e = (-(dx * dx / (2.0 * sx2) + dy * dy / (2.0 * sy2))).exp();
    let ae = p[A] * e;
    let g = [e, ae * dx / sx2, ae * dy / sy2, ae * dx * dx / (sx2 * p[SX]), ae * dy * dy / (sy2 * p[SY]), 1.0];
    (ae + p[C], g)
}

fn residual_sum(p: &[f64; 6], z: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    let w = xs.len();
    z.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (m, _) = model_and_grad(p, xs[i % w], ys[i / w]);
            (v - m).powi(2)
        })
        .sum()
}

fn cost_of(p: &[f64; 6], z: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    0.5 * residual_sum(p, z, xs, ys)
}

fn normal_equations(p: &[f64; 6], z: &[f64], xs: &[f64], ys: &[f64]) -> ([[f64; 6]; 6], [f64; 6]) {
    let w = xs.len();
    let mut jtj = [[0.0; 6]; 6];
    let mut jtr = [0.0; 6];
    for (i, &v) in z.iter().enumerate() {
        let (m, g) = model_and_grad(p, xs[i % w], ys[i / w]);
        let r = v - m;
        for a in 0..6 {
            jtr[a] += g[a] * r;
            for b in a..6 {
                jtj[a][b] += g[a] * g[b];
            }
        }
    }
    for a in 0..6 {
        for b in 0..a {
            jtj[a][b] = jtj[b][a];
        }
    }
    (jtj, jtr)
}

/// Gaussian elimination with partial pivoting.
fn solve6(mut m: [[f64; 6]; 6], mut b: [f64; 6]) -> Option<[f64; 6]> {
    for col in 0..6 {
        let piv = (col..6).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 || !m[piv][col].is_finite() {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..6 {
            let f = m[r][col] / m[col][col];
            for c in col..6 {
                m[r][c] -= f * m[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 6];
    for r in (0..6).rev() {
        let s: f64 = (r + 1..6).map(|c| m[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn gaussian(h: usize, w: usize, a: f64, mx: f64, my: f64, sx: f64, sy: f64, c: f64) -> Field {
        Field::from_fn(h, w, |y, x| {
            let (dx, dy) = (x as f64 - mx, y as f64 - my);
            a * (-(dx * dx / (2.0 * sx * sx) + dy * dy / (2.0 * sy * sy))).exp() + c
        })
    }

    #[test]
    fn recovers_exact_anisotropic_gaussian() {
        let f = gaussian(40, 50, 3.0, 22.5, 17.0, 6.0, 4.0, 0.25);
        let fit = fit_gaussian(&f).unwrap();
        assert!(fit.converged);
        for (got, want) in [
            (fit.amplitude, 3.0),
            (fit.mu_x, 22.5),
            (fit.mu_y, 17.0),
            (fit.sigma_x, 6.0),
            (fit.sigma_y, 4.0),
            (fit.offset, 0.25),
        ] {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(fit.r2 > 0.999_999);
    }

    #[test]
    fn constant_field_is_an_error() {
        let err = fit_gaussian(&Field::from_fn(8, 8, |_, _| 2.0)).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
    }

    #[test]
    fn too_few_distinct_values() {
        let f = Field::from_fn(8, 8, |y, x| ((x + y) % 3) as f64);
        assert!(fit_gaussian(&f).is_err());
    }

    #[test]
    fn solver_matches_known_system() {
        let mut m = [[0.0; 6]; 6];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 4.0 } else { 1.0 / (1 + i + j) as f64 };
            }
        }
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let b: Vec<f64> = m.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        let got = solve6(m, b.try_into().unwrap()).unwrap();
        for (g, w) in got.iter().zip(&x) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
