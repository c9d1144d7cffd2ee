//! Stability projection: the closest vector field (in ℓ²) to f̂ that
//! satisfies ∂V/∂x · f + V − c ≤ 0, computed in closed form with a ReLU.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;

use crate::error::{check_dim, Error, Result};
use crate::integrator::VectorField;
use crate::lyapunov::QuadraticLyapunov;
use crate::net::tape::{Tape, Var};
use crate::net::{MlpParams, MlpVars};

/// Floor on ‖∂V/∂x‖² in the projection denominator.
pub const EPS_G: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionOutput {
    pub f_star: Vec<f64>,
    /// g·f̂ + V − c
    pub relu_arg: f64,
    pub active: bool,
    /// g·f* + V − c
    pub residual: f64,
    /// The ‖g‖² floor was hit while the constraint was active.
    pub guard_triggered: bool,
}

impl ProjectionOutput {
    pub fn tolerance(&self) -> f64 {
        certificate_tolerance(self.relu_arg)
    }
}

pub fn certificate_tolerance(relu_arg: f64) -> f64 {
    1e-9 * (1.0 + relu_arg.abs())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projects `f_hat` in place and returns `(relu_arg, guard_triggered)`.
pub(crate) fn project_in_place(f_hat: &mut [f64], g: &[f64], v: f64, c: f64) -> (f64, bool) {
    let relu_arg = dot(g, f_hat) + v - c;
    if relu_arg > 0.0 {
        let g2 = dot(g, g);
        let guard = g2 < EPS_G;
        let coef = relu_arg / g2.max(EPS_G);
        for (f, gi) in f_hat.iter_mut().zip(g) {
            *f -= gi * coef;
        }
        (relu_arg, guard)
    } else {
        (relu_arg, false)
    }
}

pub fn project(f_hat: &[f64], g: &[f64], v: f64, c: f64) -> Result<ProjectionOutput> {
    check_dim(f_hat.len(), g.len())?;
    if !(c > 0.0) {
        return Err(Error::Config(format!("level c must be positive, got {c}")));
    }
    if !f_hat.iter().chain(g).all(|x| x.is_finite()) || !v.is_finite() || !c.is_finite() {
        return Err(Error::NonFinite("projection input".into()));
    }
    let mut f_star = f_hat.to_vec();
    let (relu_arg, guard_triggered) = project_in_place(&mut f_star, g, v, c);
    if guard_triggered {
        log::warn!("projection denominator guard triggered: relu_arg = {relu_arg}");
    }
    let residual = dot(g, &f_star) + v - c;
    Ok(ProjectionOutput {
        f_star,
        relu_arg,
        active: relu_arg > 0.0,
        residual,
        guard_triggered,
    })
}

/// Pointwise dissipativity certificate: g·f* + V − c ≤ 1e-9·(1 + |relu_arg|).
pub fn certify(output: &ProjectionOutput) -> bool {
    output.residual <= output.tolerance()
}

/// x ↦ f*(x) for a given MLP and Lyapunov function.
pub struct ProjectedField<'a> {
    mlp: &'a MlpParams,
    lyapunov: &'a QuadraticLyapunov,
    factor: Array2<f64>,
    c: f64,
    check: bool,
    violations: AtomicUsize,
    guard_hits: AtomicUsize,
}

pub fn projected_field<'a>(mlp: &'a MlpParams, lyapunov: &'a QuadraticLyapunov) -> Result<ProjectedField<'a>> {
    check_dim(mlp.dim(), lyapunov.dim())?;
    Ok(ProjectedField {
        mlp,
        lyapunov,
        factor: lyapunov.factor(),
        c: lyapunov.c(),
        check: false,
        violations: AtomicUsize::new(0),
        guard_hits: AtomicUsize::new(0),
    })
}

impl<'a> ProjectedField<'a> {
    /// Evaluates the certificate on every call and counts failures.
    pub fn with_certificate_check(mut self, on: bool) -> Self {
        self.check = on;
        self
    }

    pub fn certificate_violations(&self) -> usize {
        self.violations.load(Ordering::Relaxed)
    }

    pub fn guard_hits(&self) -> usize {
        self.guard_hits.load(Ordering::Relaxed)
    }

    /// Full projection record at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<ProjectionOutput> {
        check_dim(self.mlp.dim(), x.len())?;
        let f_hat = self.mlp.forward(x)?;
        let mut g = vec![0.0; x.len()];
        let v = self.lyapunov.value_and_grad_into(&self.factor, x, &mut g);
        project(&f_hat, &g, v, self.c)
    }
}

impl VectorField for ProjectedField<'_> {
    fn dim(&self) -> usize {
        self.mlp.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.mlp.forward_into(x, out);
        let mut g = [0.0f64; 32];
        let g = &mut g[..x.len()];
        let v = self.lyapunov.value_and_grad_into(&self.factor, x, g);
        let (relu_arg, guard) = project_in_place(out, g, v, self.c);
        if guard {
            self.guard_hits.fetch_add(1, Ordering::Relaxed);
            log::warn!("projection denominator guard triggered: relu_arg = {relu_arg}");
        }
        if self.check {
            let residual = dot(g, out) + v - self.c;
            if residual > certificate_tolerance(relu_arg) {
                self.violations.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

/// Tape handles for a [`QuadraticLyapunov`].
#[derive(Clone, Copy, Debug)]
pub struct LyapunovVars {
    pub l_raw: Var,
    pub center: Var,
    pub c_raw: Var,
    /// softplus(c_raw)
    pub c: Var,
    /// tril_positive(l_raw)
    pub factor: Var,
    pub eps_pd: f64,
}

impl LyapunovVars {
    pub fn record(tape: &Tape, lyapunov: &QuadraticLyapunov) -> Self {
        let l_raw = tape.leaf(lyapunov.l_raw.clone());
        let center = tape.leaf(
            Array2::from_shape_vec((1, lyapunov.dim()), lyapunov.center.clone()).expect("row"),
        );
        let c_raw = tape.scalar(lyapunov.c_raw);
        LyapunovVars {
            l_raw,
            center,
            c_raw,
            c: tape.softplus(c_raw),
            factor: tape.tril_positive(l_raw),
            eps_pd: lyapunov.eps_pd,
        }
    }

    /// Returns `(V, ∂V/∂x)` for a batch `x` of shape `[batch × dim]`.
    pub fn value_and_grad(&self, tape: &Tape, x: Var) -> (Var, Var) {
        let d = tape.sub_broadcast(x, self.center);
        let y = tape.matmul(d, self.factor);
        let v = tape.add(
            tape.row_sum(tape.square(y)),
            tape.scale(tape.row_sum(tape.square(d)), self.eps_pd),
        );
        let g = tape.add(
            tape.scale(tape.matmul_t(y, self.factor), 2.0),
            tape.scale(d, 2.0 * self.eps_pd),
        );
        (v, g)
    }

    pub fn volume(&self, tape: &Tape) -> Var {
        tape.ellipsoid_volume(self.factor, self.c, self.eps_pd)
    }
}

/// Batched projection on the tape: f* = f̂ − g · ReLU(g·f̂ + V − c) / max(‖g‖², ε_g).
pub fn project_tape(tape: &Tape, f_hat: Var, g: Var, v: Var, c: Var) -> Var {
    let arg = tape.sub_broadcast(tape.add(tape.row_sum(tape.mul(g, f_hat)), v), c);
    let active = tape.relu(arg);
    let denom = tape.clamp_min(tape.row_sum(tape.square(g)), EPS_G);
    let coef = tape.div(active, denom);
    tape.sub(f_hat, tape.mul_broadcast(g, coef))
}

/// f*(x) for a batch on the tape.
pub fn projected_field_tape(
    tape: &Tape,
    mlp: &MlpParams,
    mlp_vars: &MlpVars,
    lyap: &LyapunovVars,
    x: Var,
) -> Var {
    let f_hat = mlp.forward_tape(tape, mlp_vars, x);
    let (v, g) = lyap.value_and_grad(tape, x);
    project_tape(tape, f_hat, g, v, lyap.c)
}
