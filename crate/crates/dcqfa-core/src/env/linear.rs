//! Discrete-time linear system x_{t+1} = A x_t + B a_t with a stabilizing
//! linear teacher a = -G x. Serves as the analytically tractable oracle for
//! closed-loop error accumulation.

use alloc::vec;
use alloc::vec::Vec;

use super::EnvError;
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    /// State dimension n and input dimension m.
    pub n: usize,
    pub m: usize,
    /// Row-major [n, n].
    pub a: Vec<f64>,
    /// Row-major [n, m].
    pub b: Vec<f64>,
}

impl LinearSystem {
    pub fn new(n: usize, m: usize, a: Vec<f64>, b: Vec<f64>) -> Self {
        assert_eq!(a.len(), n * n);
        assert_eq!(b.len(), n * m);
        LinearSystem { n, m, a, b }
    }

    /// Two decoupled double integrators (positions and velocities in 2-D),
    /// the standard small tracking benchmark.
    pub fn double_integrator(dt: f64) -> Self {
        let mut a = vec![0.0; 16];
        for i in 0..4 {
            a[i * 4 + i] = 1.0;
        }
        a[2] = dt; // x += dt * vx
        a[1 * 4 + 3] = dt; // y += dt * vy
        let mut b = vec![0.0; 8];
        b[2 * 2] = dt; // vx += dt * ax
        b[3 * 2 + 1] = dt; // vy += dt * ay
        LinearSystem::new(4, 2, a, b)
    }

    pub fn step(&self, x: &[f64], action: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(action.len(), self.m);
        let mut next = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for j in 0..self.n {
                acc += self.a[i * self.n + j] * x[j];
            }
            for j in 0..self.m {
                acc += self.b[i * self.m + j] * action[j];
            }
            next[i] = acc;
        }
        next
    }

    /// |lambda_max| of the closed loop A - B G, by power iteration.
    pub fn closed_loop_spectral_radius(&self, gain: &[f64]) -> f64 {
        debug_assert_eq!(gain.len(), self.m * self.n);
        let n = self.n;
        let mut cl = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut bg = 0.0;
                for k in 0..self.m {
                    bg += self.b[i * self.m + k] * gain[k * n + j];
                }
                cl[i * n + j] = self.a[i * n + j] - bg;
            }
        }
        // power iteration with a fixed, fully supported start vector; the
        // per-step growth oscillates for complex eigenpairs (and the 2-norm
        // of a non-normal matrix exceeds its spectral radius), so average
        // the log growth over many late steps instead of taking the last
        // ratio
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * i as f64).collect();
        let norm0 = math::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        for x in v.iter_mut() {
            *x /= norm0;
        }
        let (burn_in, samples) = (100, 400);
        let mut log_sum = 0.0;
        for it in 0..burn_in + samples {
            let mut w = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    w[i] += cl[i * n + j] * v[j];
                }
            }
            let norm = math::sqrt(w.iter().map(|x| x * x).sum::<f64>());
            if norm < 1e-300 {
                return 0.0;
            }
            if it >= burn_in {
                log_sum += math::ln(norm);
            }
            v = w.iter().map(|x| x / norm).collect();
        }
        math::exp(log_sum / samples as f64)
    }

    /// Validate that `gain` stabilizes the loop.
    pub fn check_stable(&self, gain: &[f64]) -> Result<(), EnvError> {
        let rho = self.closed_loop_spectral_radius(gain);
        if rho < 1.0 {
            Ok(())
        } else {
            Err(EnvError::UnstableTeacher { spectral_radius: rho })
        }
    }
}

/// Policy closure for a fixed linear gain: a = -G x.
pub fn gain_policy(gain: Vec<f64>, n: usize, m: usize) -> impl Fn(&[f64]) -> Vec<f64> {
    move |x: &[f64]| {
        let mut a = vec![0.0; m];
        for i in 0..m {
            for j in 0..n {
                a[i] -= gain[i * n + j] * x[j];
            }
        }
        a
    }
}

/// Terminal deviation ||x_T(student) - x_T(teacher)|| after `t` steps, both
/// driven from `x0`, each acting on its own visited states. Divergence past
/// 1e6 reports an infinite gap.
pub fn accumulation_gap(
    system: &LinearSystem,
    teacher: &dyn Fn(&[f64]) -> Vec<f64>,
    student: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    t: usize,
) -> f64 {
    let mut xt = x0.to_vec();
    let mut xs = x0.to_vec();
    for _ in 0..t {
        xt = system.step(&xt, &teacher(&xt));
        xs = system.step(&xs, &student(&xs));
        let bound = |v: &[f64]| v.iter().any(|x| math::abs(*x) > 1e6 || !x.is_finite());
        if bound(&xt) || bound(&xs) {
            return f64::INFINITY;
        }
    }
    math::sqrt(
        xt.iter()
            .zip(&xs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>(),
    )
}

/// A stabilizing PD gain for [`LinearSystem::double_integrator`].
pub fn double_integrator_gain() -> Vec<f64> {
    // a = -(kp * p + kd * v), per axis
    let (kp, kd) = (1.0, 1.6);
    vec![
        kp, 0.0, kd, 0.0, //
        0.0, kp, 0.0, kd,
    ]
}
