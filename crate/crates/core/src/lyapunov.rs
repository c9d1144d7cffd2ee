//! Learnable quadratic Lyapunov function V(x) = (x − x₀)ᵀQ(x − x₀) and its
//! level set M(c) = {x : V(x) ≤ c}.
//!
//! Q is parameterized as L·Lᵀ + ε·I with L lower triangular and a
//! softplus-mapped diagonal, so every parameter value gives a positive
//! definite Q with λ_min(Q) ≥ ε. The level c is softplus(c_raw).

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::net::tape::{gram_plus_eps, softplus, softplus_inverse, tril_positive};

pub const DEFAULT_EPS_PD: f64 = 1e-4;

/// Dense Cholesky factor of a small symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidDimension("cholesky needs a square matrix".into()));
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > 0.0) {
                return Err(Error::NonFinite(format!(
                    "matrix is not positive definite (pivot {j} = {d})"
                )));
            }
            let d = d.sqrt();
            l[[j, j]] = d;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / d;
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn determinant(&self) -> f64 {
        self.lower.diag().iter().map(|d| d * d).product()
    }

    /// Solves L y = b.
    fn forward(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[[i, k]] * b[k];
            }
            b[i] = s / self.lower[[i, i]];
        }
    }

    /// Solves Lᵀ x = b.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = b.len();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.lower[[k, i]] * b[k];
            }
            b[i] = s / self.lower[[i, i]];
        }
    }

    /// Solves A x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        self.forward(b);
        self.solve_upper(b);
    }

    /// A⁻¹ B column by column.
    pub fn solve_matrix(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = b.clone();
        for mut col in out.columns_mut() {
            let mut v = col.to_vec();
            self.solve(&mut v);
            col.assign(&ndarray::ArrayView1::from(&v));
        }
        out
    }
}

/// Volume of the unit ball in ℝⁿ, π^{n/2} / Γ(n/2 + 1).
pub fn unit_ball_volume(n: usize) -> f64 {
    // V_n = (2π/n) V_{n-2}, V_0 = 1, V_1 = 2
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / n as f64 * unit_ball_volume(n - 2),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticLyapunov {
    /// Raw factor entries; the strict upper triangle is ignored.
    pub l_raw: Array2<f64>,
    pub center: Vec<f64>,
    pub c_raw: f64,
    pub eps_pd: f64,
}

impl QuadraticLyapunov {
    /// Builds V from an explicit lower-triangular factor with positive diagonal.
    pub fn from_factor(l: &Array2<f64>, center: Vec<f64>, c: f64, eps_pd: f64) -> Result<Self> {
        let n = center.len();
        if l.dim() != (n, n) {
            return Err(Error::InputShape {
                expected: n,
                got: l.nrows(),
            });
        }
        if !(c > 0.0) || !(eps_pd > 0.0) {
            return Err(Error::Config("level c and eps_pd must be positive".into()));
        }
        let mut l_raw = Array2::zeros((n, n));
        for i in 0..n {
            if !(l[[i, i]] > 0.0) {
                return Err(Error::Config("factor diagonal must be positive".into()));
            }
            l_raw[[i, i]] = softplus_inverse(l[[i, i]]);
            for j in 0..i {
                l_raw[[i, j]] = l[[i, j]];
            }
        }
        Ok(QuadraticLyapunov {
            l_raw,
            center,
            c_raw: softplus_inverse(c),
            eps_pd,
        })
    }

    /// V with Q = I exactly (L = √(1 − ε)·I).
    pub fn identity(n: usize, c: f64, eps_pd: f64) -> Result<Self> {
        let l = Array2::eye(n) * (1.0 - eps_pd).sqrt();
        Self::from_factor(&l, vec![0.0; n], c, eps_pd)
    }

    /// Centers V on the data mean with an axis-aligned level set M(1) whose
    /// semi-axes are twice those of the ellipsoid bounding the data box.
    pub fn init_from_states<'a>(
        states: impl IntoIterator<Item = &'a [f64]>,
        dim: usize,
        eps_pd: f64,
    ) -> Result<Self> {
        let pts: Vec<&[f64]> = states.into_iter().collect();
        if pts.is_empty() {
            return Err(Error::Config("cannot initialize V from an empty dataset".into()));
        }
        let mut mean = vec![0.0; dim];
        for p in &pts {
            check_dim(dim, p.len())?;
            for (m, v) in mean.iter_mut().zip(p.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= pts.len() as f64);
        let mut l = Array2::zeros((dim, dim));
        for i in 0..dim {
            let half = pts
                .iter()
                .map(|p| (p[i] - mean[i]).abs())
                .fold(0.0, f64::max)
                .max(1e-3);
            let axis = 2.0 * (dim as f64).sqrt() * half;
            let q = 1.0 / (axis * axis);
            // Q_ii = L_ii² + ε; keep a small positive factor if ε already dominates
            l[[i, i]] = (q - eps_pd).max(0.01 * q).sqrt();
        }
        Self::from_factor(&l, mean, 1.0, eps_pd)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn c(&self) -> f64 {
        softplus(self.c_raw)
    }

    pub fn factor(&self) -> Array2<f64> {
        tril_positive(&self.l_raw)
    }

    pub fn q(&self) -> Array2<f64> {
        gram_plus_eps(&self.factor(), self.eps_pd)
    }

    pub fn cholesky(&self) -> Cholesky {
        Cholesky::new(&self.q()).expect("LLᵀ + εI is positive definite")
    }

    /// Evaluates V and ∂V/∂x together; `grad` receives 2Q(x − x₀).
    pub(crate) fn value_and_grad_into(&self, l: &Array2<f64>, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.dim();
        let mut d = [0.0f64; 32];
        let mut y = [0.0f64; 32];
        debug_assert!(n <= 32);
        for i in 0..n {
            d[i] = x[i] - self.center[i];
        }
        // y = Lᵀ d
        for j in 0..n {
            let mut s = 0.0;
            for i in j..n {
                s += l[[i, j]] * d[i];
            }
            y[j] = s;
        }
        let mut v = 0.0;
        for i in 0..n {
            v += y[i] * y[i] + self.eps_pd * d[i] * d[i];
        }
        // g = 2 (L y + ε d)
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..=i {
                s += l[[i, j]] * y[j];
            }
            grad[i] = 2.0 * (s + self.eps_pd * d[i]);
        }
        v
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut g = vec![0.0; x.len()];
        Ok(self.value_and_grad_into(&self.factor(), x, &mut g))
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut g = vec![0.0; x.len()];
        self.value_and_grad_into(&self.factor(), x, &mut g);
        Ok(g)
    }

    /// Vol(M(c)) = π^{n/2}/Γ(n/2+1) · √(cⁿ / det Q).
    pub fn level_set_volume(&self) -> f64 {
        let n = self.dim();
        unit_ball_volume(n) * (self.c().powi(n as i32) / self.cholesky().determinant()).sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        Ok(self.value(x)? <= self.c())
    }

    /// Points on the boundary {V = c}: x₀ + √c · L_Q^{-T} u with u uniform on
    /// the unit sphere and L_Q the Cholesky factor of Q.
    pub fn sample_boundary(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::Config("boundary sample count must be at least 1".into()));
        }
        let n = self.dim();
        let chol = self.cholesky();
        let scale = self.c().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            u.iter_mut().for_each(|v| *v /= norm);
            chol.solve_upper(&mut u);
            out.push(
                u.iter()
                    .zip(&self.center)
                    .map(|(z, x0)| x0 + scale * z)
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Smallest eigenvalue lower bound check: Q − (ε − slack)·I admits a Cholesky factor.
    pub fn certifies_pd(&self, slack: f64) -> bool {
        let mut q = self.q();
        q.diag_mut().mapv_inplace(|d| d - self.eps_pd + slack);
        Cholesky::new(&q).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_lyapunov(n: usize, rng: &mut impl Rng) -> QuadraticLyapunov {
        let l_raw = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let center = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        QuadraticLyapunov {
            l_raw,
            center,
            c_raw: rng.random_range(-1.0..2.0),
            eps_pd: DEFAULT_EPS_PD,
        }
    }

    fn dense_quadratic(q: &Array2<f64>, d: &[f64]) -> f64 {
        let n = d.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += d[i] * q[[i, j]] * d[j];
            }
        }
        s
    }

    #[test]
    fn value_at_center_and_identity() {
        let v = QuadraticLyapunov::identity(3, 1.0, DEFAULT_EPS_PD).unwrap();
        assert_eq!(v.value(&[0.0; 3]).unwrap(), 0.0);
        assert!((v.value(&[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-14);
        let g = v.grad(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in g.iter().zip([2.0, 4.0, 6.0]) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(v.grad(&[0.0; 3]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn value_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v = random_lyapunov(4, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d: Vec<f64> = x.iter().zip(&v.center).map(|(a, b)| a - b).collect();
            let want = dense_quadratic(&v.q(), &d);
            let got = v.value(&x).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let v = random_lyapunov(3, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let g = v.grad(&x).unwrap();
            for i in 0..3 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (v.value(&xp).unwrap() - v.value(&xm).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-7 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let v = QuadraticLyapunov::identity(3, 1.0, DEFAULT_EPS_PD).unwrap();
        assert!(matches!(v.value(&[1.0]), Err(Error::InputShape { .. })));
        assert!(matches!(v.grad(&[1.0; 4]), Err(Error::InputShape { .. })));
    }

    #[test]
    fn volume_closed_forms() {
        let disk = QuadraticLyapunov::identity(2, 1.0, DEFAULT_EPS_PD).unwrap();
        assert!((disk.level_set_volume() - PI).abs() < 1e-12);
        let ball = QuadraticLyapunov::identity(3, 1.0, DEFAULT_EPS_PD).unwrap();
        assert!((ball.level_set_volume() - 4.0 * PI / 3.0).abs() < 1e-12);
        let eps = DEFAULT_EPS_PD;
        let l = Array2::from_diag(&ndarray::arr1(&[
            (1.0 - eps).sqrt(),
            (4.0 - eps).sqrt(),
            (9.0 - eps).sqrt(),
        ]));
        let ell = QuadraticLyapunov::from_factor(&l, vec![0.0; 3], 1.0, eps).unwrap();
        assert!((ell.level_set_volume() - 4.0 * PI / 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn unit_ball_volume_matches_gamma_formula() {
        // Γ(n/2 + 1) by the half-integer recursion from Γ(1) = 1 and Γ(1/2) = √π
        fn gamma_half(m2: usize) -> f64 {
            // Γ(m2 / 2)
            match m2 {
                1 => PI.sqrt(),
                2 => 1.0,
                _ => (m2 as f64 / 2.0 - 1.0) * gamma_half(m2 - 2),
            }
        }
        for n in 1..=10usize {
            let want = PI.powf(n as f64 / 2.0) / gamma_half(n + 2);
            assert!((unit_ball_volume(n) - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn contains_and_boundary() {
        let v = QuadraticLyapunov::identity(3, 1.0, DEFAULT_EPS_PD).unwrap();
        assert!(v.contains(&[0.0; 3]).unwrap());
        assert!(!v.contains(&[2.0, 0.0, 0.0]).unwrap());
        let v4 = QuadraticLyapunov::identity(3, 4.0, DEFAULT_EPS_PD).unwrap();
        for p in v4.sample_boundary(200, 9).unwrap() {
            let r = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 2.0).abs() < 1e-9);
        }
        assert_eq!(v4.sample_boundary(10, 1).unwrap(), v4.sample_boundary(10, 1).unwrap());
        assert!(v4.sample_boundary(0, 1).is_err());
    }

    #[test]
    fn random_boundary_samples_lie_on_level_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let v = random_lyapunov(5, &mut rng);
            let c = v.c();
            for p in v.sample_boundary(100, 2).unwrap() {
                let val = v.value(&p).unwrap();
                assert!((val - c).abs() < 1e-9 * c.max(1.0));
                assert!(v.contains(&p).unwrap() || val - c < 1e-12 * c.max(1.0));
            }
        }
    }

    #[test]
    fn boundary_sample_mean_tends_to_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random_lyapunov(3, &mut rng);
        let pts = v.sample_boundary(10_000, 11).unwrap();
        let mut mean = [0.0; 3];
        for p in &pts {
            for i in 0..3 {
                mean[i] += p[i] / pts.len() as f64;
            }
        }
        // λ_min(Q) ≥ det Q / tr(Q)^{n-1}
        let q = v.q();
        let trace: f64 = q.diag().sum();
        let lambda_min_lower = v.cholesky().determinant() / trace.powi(2);
        let tol = 0.1 * (v.c() / lambda_min_lower).sqrt();
        let dist = mean
            .iter()
            .zip(&v.center)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < tol, "{dist} vs {tol}");
    }

    #[test]
    fn pd_certificate_and_radial_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v = random_lyapunov(4, &mut rng);
            assert!(v.certifies_pd(1e-12));
            let mut u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            for t in [1.0, 10.0, 1e3] {
                let x: Vec<f64> = v.center.iter().zip(&u).map(|(c, d)| c + t * d).collect();
                assert!(v.value(&x).unwrap() >= v.eps_pd * t * t * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn monte_carlo_volume_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_lyapunov(3, &mut rng);
        let c = v.c();
        // bounding box from the diagonal of Q⁻¹: |x_i − x0_i| ≤ √(c (Q⁻¹)_ii)
        let chol = v.cholesky();
        let half: Vec<f64> = (0..3)
            .map(|i| {
                let mut e = vec![0.0; 3];
                e[i] = 1.0;
                chol.solve(&mut e);
                (c * e[i]).sqrt()
            })
            .collect();
        let samples = 1_000_000;
        let mut hits = 0usize;
        let mut x = [0.0; 3];
        for _ in 0..samples {
            for i in 0..3 {
                x[i] = v.center[i] + rng.random_range(-half[i]..half[i]);
            }
            if v.contains(&x).unwrap() {
                hits += 1;
            }
        }
        let box_vol: f64 = half.iter().map(|h| 2.0 * h).product();
        let mc = box_vol * hits as f64 / samples as f64;
        let exact = v.level_set_volume();
        assert!((mc - exact).abs() / exact < 0.05, "{mc} vs {exact}");
    }

    #[test]
    fn init_covers_data() {
        let pts = [vec![0.0, 10.0], vec![4.0, -2.0], vec![2.0, 4.0]];
        let v = QuadraticLyapunov::init_from_states(pts.iter().map(Vec::as_slice), 2, 1e-4).unwrap();
        assert!((v.c() - 1.0).abs() < 1e-12);
        assert_eq!(v.center, vec![2.0, 4.0]);
        for p in &pts {
            assert!(v.value(p).unwrap() < 0.5);
        }
    }
}
