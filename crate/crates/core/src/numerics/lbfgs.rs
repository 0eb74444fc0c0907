//! Limited-memory BFGS with a backtracking (Armijo) line search.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Converged when the gradient's Euclidean norm drops below this.
    pub gradient_tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 5000,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which returns the value and gradient at a point.
///
/// Points where `f` fails or returns a non-finite value are treated as
/// infinitely bad during the line search.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut stalls = 0;

    while iterations < opts.max_iterations {
        let gnorm = norm(&g);
        if gnorm < opts.gradient_tolerance {
            return Ok(Minimum {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                converged: true,
            });
        }
        iterations += 1;

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if slope.is_nan() || slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }

        let mut step = if history.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            stalls += 1;
            if stalls > 3 {
                break;
            }
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        let no_progress = (fx - fnew).abs() <= 1e-15 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if no_progress {
            stalls += 1;
            if stalls > 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let gradient_norm = norm(&g);
    Ok(Minimum {
        x,
        value: fx,
        converged: gradient_norm < opts.gradient_tolerance,
        gradient_norm,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((v, g))
        };
        let m = minimize(f, vec![-1.2, 1.0], &LbfgsOptions::default()).unwrap();
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales = [1.0, 10.0, 100.0, 1e4];
        let f = |x: &[f64]| {
            let v = x.iter().zip(&scales).map(|(xi, s)| 0.5 * s * (xi - 1.0).powi(2)).sum();
            let g = x.iter().zip(&scales).map(|(xi, s)| s * (xi - 1.0)).collect();
            Ok((v, g))
        };
        let m = minimize(f, vec![0.0; 4], &LbfgsOptions::default()).unwrap();
        assert!(m.converged);
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}
