//! Ground-truth right-hand sides for the benchmark chaotic systems.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrator::VectorField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    Lorenz63,
    Lorenz96,
    TruncatedKs,
}

/// A benchmark system together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Lorenz63 {
        #[serde(default = "defaults::sigma")]
        sigma: f64,
        #[serde(default = "defaults::rho")]
        rho: f64,
        #[serde(default = "defaults::beta")]
        beta: f64,
    },
    Lorenz96 {
        #[serde(default = "defaults::forcing")]
        forcing: f64,
        #[serde(default = "defaults::l96_dim")]
        dim: usize,
    },
    TruncatedKs {
        #[serde(default = "defaults::nu")]
        nu: f64,
        #[serde(default = "defaults::modes")]
        modes: usize,
    },
}

mod defaults {
    pub fn sigma() -> f64 {
        10.0
    }
    pub fn rho() -> f64 {
        28.0
    }
    pub fn beta() -> f64 {
        8.0 / 3.0
    }
    pub fn forcing() -> f64 {
        8.0
    }
    pub fn l96_dim() -> usize {
        5
    }
    // ν = 0.03 leaves all four modes linearly unstable and the energy-conserving
    // truncation then blows up; 0.21 sits in a robustly chaotic window.
    pub fn nu() -> f64 {
        0.21
    }
    pub fn modes() -> usize {
        4
    }
}

impl SystemSpec {
    pub fn lorenz63() -> Self {
        SystemSpec::Lorenz63 {
            sigma: defaults::sigma(),
            rho: defaults::rho(),
            beta: defaults::beta(),
        }
    }

    pub fn lorenz96() -> Self {
        SystemSpec::Lorenz96 {
            forcing: defaults::forcing(),
            dim: defaults::l96_dim(),
        }
    }

    pub fn truncated_ks() -> Self {
        SystemSpec::TruncatedKs {
            nu: defaults::nu(),
            modes: defaults::modes(),
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            SystemSpec::Lorenz63 { .. } => SystemKind::Lorenz63,
            SystemSpec::Lorenz96 { .. } => SystemKind::Lorenz96,
            SystemSpec::TruncatedKs { .. } => SystemKind::TruncatedKs,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            SystemSpec::Lorenz63 { .. } => 3,
            SystemSpec::Lorenz96 { dim, .. } => dim,
            SystemSpec::TruncatedKs { modes, .. } => 2 * modes,
        }
    }

    /// Short provenance tag used in trajectory metadata and manifests.
    pub fn tag(&self) -> String {
        match *self {
            SystemSpec::Lorenz63 { sigma, rho, beta } => {
                format!("lorenz63(sigma={sigma},rho={rho},beta={beta})")
            }
            SystemSpec::Lorenz96 { forcing, dim } => format!("lorenz96(F={forcing},n={dim})"),
            SystemSpec::TruncatedKs { nu, modes } => format!("truncated_ks(nu={nu},N={modes})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SystemSpec::Lorenz63 { sigma, rho, beta } => {
                if ![sigma, rho, beta].iter().all(|v| v.is_finite()) {
                    return Err(Error::Config("lorenz63 parameters must be finite".into()));
                }
            }
            SystemSpec::Lorenz96 { forcing, dim } => {
                if dim < 4 {
                    return Err(Error::InvalidDimension(format!(
                        "lorenz96 needs n >= 4, got {dim}"
                    )));
                }
                if !forcing.is_finite() {
                    return Err(Error::Config("lorenz96 forcing must be finite".into()));
                }
            }
            SystemSpec::TruncatedKs { nu, modes } => {
                if modes == 0 {
                    return Err(Error::InvalidDimension("truncated KS needs N >= 1".into()));
                }
                if !(nu > 0.0 && nu.is_finite()) {
                    return Err(Error::Config(format!("truncated KS needs nu > 0, got {nu}")));
                }
            }
        }
        Ok(())
    }

    /// Default per-dimension box for sampling initial conditions.
    pub fn default_init_box(&self) -> Vec<(f64, f64)> {
        match *self {
            SystemSpec::Lorenz63 { .. } => vec![(-15.0, 15.0), (-15.0, 15.0), (0.0, 40.0)],
            SystemSpec::Lorenz96 { dim, .. } => vec![(-8.0, 8.0); dim],
            SystemSpec::TruncatedKs { modes, .. } => vec![(-1.0, 1.0); 2 * modes],
        }
    }

    pub fn rhs(&self, x: &[f64]) -> Result<Vec<f64>> {
        match *self {
            SystemSpec::Lorenz63 { sigma, rho, beta } => lorenz63_rhs(x, sigma, rho, beta),
            SystemSpec::Lorenz96 { forcing, dim } => {
                check_dim(dim, x.len())?;
                lorenz96_rhs(x, forcing)
            }
            SystemSpec::TruncatedKs { nu, modes } => {
                check_dim(2 * modes, x.len())?;
                truncated_ks_rhs(x, nu)
            }
        }
    }
}

impl VectorField for SystemSpec {
    fn dim(&self) -> usize {
        SystemSpec::dim(self)
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            SystemSpec::Lorenz63 { sigma, rho, beta } => lorenz63_into(x, sigma, rho, beta, out),
            SystemSpec::Lorenz96 { forcing, .. } => lorenz96_into(x, forcing, out),
            SystemSpec::TruncatedKs { nu, .. } => truncated_ks_into(x, nu, out),
        }
    }
}

pub fn lorenz63_rhs(x: &[f64], sigma: f64, rho: f64, beta: f64) -> Result<Vec<f64>> {
    check_dim(3, x.len())?;
    let mut out = vec![0.0; 3];
    lorenz63_into(x, sigma, rho, beta, &mut out);
    Ok(out)
}

fn lorenz63_into(x: &[f64], sigma: f64, rho: f64, beta: f64, out: &mut [f64]) {
    out[0] = sigma * (x[1] - x[0]);
    out[1] = x[0] * (rho - x[2]) - x[1];
    out[2] = x[0] * x[1] - beta * x[2];
}

/// Lorenz 96 with cyclic indices: ẋᵢ = (xᵢ₊₁ − xᵢ₋₂)xᵢ₋₁ − xᵢ + F.
pub fn lorenz96_rhs(x: &[f64], forcing: f64) -> Result<Vec<f64>> {
    if x.len() < 4 {
        return Err(Error::InvalidDimension(format!(
            "lorenz96 needs n >= 4, got {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    lorenz96_into(x, forcing, &mut out);
    Ok(out)
}

fn lorenz96_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let next = x[(i + 1) % n];
        let prev = x[(i + n - 1) % n];
        let prev2 = x[(i + n - 2) % n];
        out[i] = (next - prev2) * prev - x[i] + forcing;
    }
}

/// Linear growth rate of Fourier mode `k`: k² − νk⁴.
pub fn ks_growth_rate(k: usize, nu: f64) -> f64 {
    let k = k as f64;
    k * k - nu * k.powi(4)
}

/// Galerkin-truncated Kuramoto–Sivashinsky right-hand side.
///
/// The state packs `(α₁..α_N, β₁..β_N)`, the cosine and sine amplitudes of
/// modes 1..N; the mean mode α₀ is held at zero.
pub fn truncated_ks_rhs(state: &[f64], nu: f64) -> Result<Vec<f64>> {
    if state.is_empty() || state.len() % 2 != 0 {
        return Err(Error::InvalidDimension(format!(
            "truncated KS state length must be even and positive, got {}",
            state.len()
        )));
    }
    if !(nu > 0.0) {
        return Err(Error::Config(format!("truncated KS needs nu > 0, got {nu}")));
    }
    let mut out = vec![0.0; state.len()];
    truncated_ks_into(state, nu, &mut out);
    Ok(out)
}

fn truncated_ks_into(state: &[f64], nu: f64, out: &mut [f64]) {
    let n = state.len() / 2;
    let (alpha, beta) = state.split_at(n);
    // 1-based mode accessors
    let a = |m: usize| alpha[m - 1];
    let b = |m: usize| beta[m - 1];
    for k in 1..=n {
        let kf = k as f64;
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for m in 1..k {
            sum_a += a(m) * b(k - m);
            sum_b += a(m) * a(k - m) - b(m) * b(k - m);
        }
        let mut diff_a = 0.0;
        let mut diff_b = 0.0;
        for m in 1..=(n - k) {
            diff_a += a(m + k) * b(m) - a(m) * b(m + k);
            diff_b += a(m + k) * a(m) + b(m + k) * b(m);
        }
        let lam = ks_growth_rate(k, nu);
        out[k - 1] = lam * a(k) - 0.5 * kf * sum_a + 0.5 * kf * diff_a;
        out[n + k - 1] = lam * b(k) + 0.25 * kf * sum_b + 0.5 * kf * diff_b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz63_hand_values() {
        let p = (10.0, 28.0, 8.0 / 3.0);
        assert_eq!(lorenz63_rhs(&[0.0; 3], p.0, p.1, p.2).unwrap(), vec![0.0; 3]);
        let v = lorenz63_rhs(&[1.0, 1.0, 1.0], p.0, p.1, p.2).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 26.0);
        assert!((v[2] - (1.0 - 8.0 / 3.0)).abs() < 1e-15);
        let v = lorenz63_rhs(&[1.0, 2.0, 3.0], p.0, p.1, p.2).unwrap();
        assert_eq!(v[0], 10.0);
        assert_eq!(v[1], 23.0);
        assert!((v[2] - (2.0 - 8.0)).abs() < 1e-15);
    }

    #[test]
    fn lorenz63_rejects_wrong_shape() {
        assert!(matches!(
            lorenz63_rhs(&[1.0, 2.0], 10.0, 28.0, 8.0 / 3.0),
            Err(Error::InputShape { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn lorenz96_hand_values() {
        assert_eq!(lorenz96_rhs(&[0.0; 5], 8.0).unwrap(), vec![8.0; 5]);
        assert_eq!(lorenz96_rhs(&[1.0; 5], 8.0).unwrap(), vec![7.0; 5]);
        // x = e₁ (0-based index 0); terms written out per component:
        // i=0: (x1 - x3) x4 - x0 + F = (0-0)*0 - 1 + 8 = 7
        // i=1: (x2 - x4) x0 - x1 + F = (0-0)*1 - 0 + 8 = 8
        // i=2: (x3 - x0) x1 - x2 + F = (0-1)*0 - 0 + 8 = 8
        // i=3: (x4 - x1) x2 - x3 + F = 8
        // i=4: (x0 - x2) x3 - x4 + F = (1-0)*0 - 0 + 8 = 8
        assert_eq!(
            lorenz96_rhs(&[1.0, 0.0, 0.0, 0.0, 0.0], 8.0).unwrap(),
            vec![7.0, 8.0, 8.0, 8.0, 8.0]
        );
        // x = (1,2,0,0,0) exercises every product slot
        // i=0: (2-0)*0 - 1 + 8 = 7
        // i=1: (0-0)*1 - 2 + 8 = 6
        // i=2: (0-1)*2 - 0 + 8 = 6
        // i=3: (0-2)*0 - 0 + 8 = 8
        // i=4: (1-0)*0 - 0 + 8 = 8
        assert_eq!(
            lorenz96_rhs(&[1.0, 2.0, 0.0, 0.0, 0.0], 8.0).unwrap(),
            vec![7.0, 6.0, 6.0, 8.0, 8.0]
        );
    }

    #[test]
    fn lorenz96_rejects_small_dimension() {
        assert!(matches!(
            lorenz96_rhs(&[0.0; 3], 8.0),
            Err(Error::InvalidDimension(_))
        ));
        assert!(SystemSpec::Lorenz96 { forcing: 8.0, dim: 3 }.validate().is_err());
    }

    #[test]
    fn truncated_ks_zero_and_single_mode() {
        assert_eq!(truncated_ks_rhs(&[0.0; 8], 0.21).unwrap(), vec![0.0; 8]);
        let mut s = [0.0; 8];
        s[0] = 1.0;
        let v = truncated_ks_rhs(&s, 0.03).unwrap();
        let mut expected = [0.0; 8];
        expected[0] = ks_growth_rate(1, 0.03);
        expected[4 + 1] = 0.5;
        for (got, want) in v.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{v:?}");
        }
    }

    #[test]
    fn truncated_ks_rejects_odd_length() {
        assert!(matches!(
            truncated_ks_rhs(&[0.0; 7], 0.2),
            Err(Error::InvalidDimension(_))
        ));
        assert!(SystemSpec::TruncatedKs { nu: 0.0, modes: 4 }.validate().is_err());
    }

    #[test]
    fn growth_rate_sign_structure() {
        for nu in [0.03, 0.1, 0.21, 0.5] {
            for k in 1..=4usize {
                let direct = (k * k) as f64 - nu * (k.pow(4)) as f64;
                assert_eq!(ks_growth_rate(k, nu), direct);
                assert_eq!(direct > 0.0, nu < 1.0 / (k * k) as f64);
            }
        }
    }

    #[test]
    fn spec_dims_and_validation() {
        assert_eq!(SystemSpec::lorenz63().dim(), 3);
        assert_eq!(SystemSpec::lorenz96().dim(), 5);
        assert_eq!(SystemSpec::truncated_ks().dim(), 8);
        for s in [SystemSpec::lorenz63(), SystemSpec::lorenz96(), SystemSpec::truncated_ks()] {
            s.validate().unwrap();
            assert_eq!(s.default_init_box().len(), s.dim());
        }
    }

    /// Galerkin projection of u_t = −u·u_x − u_xx − ν·u_xxxx evaluated by
    /// quadrature on a physical grid fine enough to integrate exactly.
    fn ks_oracle(state: &[f64], nu: f64) -> Vec<f64> {
        use std::f64::consts::PI;
        let n = state.len() / 2;
        let grid = 16 * n;
        let mut out = vec![0.0; 2 * n];
        for j in 0..grid {
            let x = 2.0 * PI * j as f64 / grid as f64;
            let mut u = 0.0;
            let mut ux = 0.0;
            let mut uxx = 0.0;
            let mut uxxxx = 0.0;
            for k in 1..=n {
                let kf = k as f64;
                let (s, c) = (kf * x).sin_cos();
                let (a, b) = (state[k - 1], state[n + k - 1]);
                u += a * c + b * s;
                ux += kf * (b * c - a * s);
                uxx -= kf * kf * (a * c + b * s);
                uxxxx += kf.powi(4) * (a * c + b * s);
            }
            let ut = -u * ux - uxx - nu * uxxxx;
            for k in 1..=n {
                let (s, c) = (k as f64 * x).sin_cos();
                out[k - 1] += 2.0 / grid as f64 * ut * c;
                out[n + k - 1] += 2.0 / grid as f64 * ut * s;
            }
        }
        out
    }

    #[test]
    fn truncated_ks_matches_physical_space_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let state: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let nu = rng.random_range(0.01..0.3);
            let got = truncated_ks_rhs(&state, nu).unwrap();
            let want = ks_oracle(&state, nu);
            let err: f64 = got.iter().zip(&want).map(|(g, w)| (g - w).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(err <= 1e-12 * norm, "relative error {}", err / norm);
        }
        assert_eq!(truncated_ks_rhs(&[0.0; 8], 0.21).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn growth_rate_table() {
        let nu = 0.21;
        let table = [1.0 - nu, 4.0 - 16.0 * nu, 9.0 - 81.0 * nu, 16.0 - 256.0 * nu];
        for (k, want) in table.iter().enumerate() {
            assert!((ks_growth_rate(k + 1, nu) - want).abs() < 1e-14);
        }
    }

    proptest::proptest! {
        #[test]
        fn lorenz96_is_shift_equivariant(x in proptest::collection::vec(-20.0f64..20.0, 5), forcing in -10.0f64..10.0) {
            let f = lorenz96_rhs(&x, forcing).unwrap();
            let mut shifted = x.clone();
            shifted.rotate_right(1);
            let mut f_expected = f.clone();
            f_expected.rotate_right(1);
            let g = lorenz96_rhs(&shifted, forcing).unwrap();
            for (a, b) in g.iter().zip(&f_expected) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        /// u(x) → u(x + θ) rotates mode k by kθ and commutes with the flow.
        #[test]
        fn truncated_ks_is_translation_equivariant(x in proptest::collection::vec(-5.0f64..5.0, 8), theta in 0.0f64..6.3) {
            let rotate = |v: &[f64]| {
                let mut out = v.to_vec();
                for k in 1..=4 {
                    let (s, c) = (k as f64 * theta).sin_cos();
                    let (a, b) = (v[k - 1], v[k + 3]);
                    out[k - 1] = a * c + b * s;
                    out[k + 3] = b * c - a * s;
                }
                out
            };
            let lhs = truncated_ks_rhs(&rotate(&x), 0.21).unwrap();
            let rhs = rotate(&truncated_ks_rhs(&x, 0.21).unwrap());
            for (a, b) in lhs.iter().zip(&rhs) {
                proptest::prop_assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()));
            }
        }
    }
}
