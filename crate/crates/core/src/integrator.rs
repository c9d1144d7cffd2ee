//! Fixed-step RK4 integration and trajectory rollout.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Default ∞-norm level above which a rollout is declared blown up.
pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e6;

/// An autonomous vector field ẋ = f(x).
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    /// Writes f(x) into `out`; both slices have length `dim()`.
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval(x, out)
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Sampled trajectory with a fixed period `h`.
///
/// States are stored row-major. When a rollout is cut short by blowup
/// detection, only the finite prefix is kept and `truncated_at` holds the
/// index of the first offending state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
    pub h: f64,
    pub system_tag: String,
    pub truncated_at: Option<usize>,
}

impl Trajectory {
    pub fn new(dim: usize, h: f64, system_tag: impl Into<String>) -> Self {
        Trajectory {
            dim,
            data: Vec::new(),
            h,
            system_tag: system_tag.into(),
            truncated_at: None,
        }
    }

    pub fn from_states(states: &[Vec<f64>], h: f64, system_tag: impl Into<String>) -> Result<Self> {
        let dim = states.first().map(Vec::len).unwrap_or(0);
        let mut traj = Trajectory::new(dim, h, system_tag);
        for s in states {
            traj.push(s)?;
        }
        Ok(traj)
    }

    pub fn push(&mut self, state: &[f64]) -> Result<()> {
        check_dim(self.dim, state.len())?;
        self.data.extend_from_slice(state);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn states(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn last(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.state(self.len() - 1))
    }

    /// Time series of one coordinate.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states().map(|s| s[i]).collect()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step<F: VectorField + ?Sized>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    check_dim(f.dim(), x.len())?;
    let mut ws = Rk4Workspace::new(x.len());
    let mut out = vec![0.0; x.len()];
    ws.step(f, x, h, &mut out)?;
    Ok(out)
}

/// Scratch buffers so repeated steps do not allocate.
pub(crate) struct Rk4Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub(crate) fn new(n: usize) -> Self {
        Rk4Workspace {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }

    pub(crate) fn step<F: VectorField + ?Sized>(
        &mut self,
        f: &F,
        x: &[f64],
        h: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        f.eval(x, k1);
        finite_stage(k1, 1)?;
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        f.eval(tmp, k2);
        finite_stage(k2, 2)?;
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        f.eval(tmp, k3);
        finite_stage(k3, 3)?;
        for i in 0..x.len() {
            tmp[i] = x[i] + h * k3[i];
        }
        f.eval(tmp, k4);
        finite_stage(k4, 4)?;
        for i in 0..x.len() {
            out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(())
    }
}

fn finite_stage(k: &[f64], stage: usize) -> Result<()> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { stage })
    }
}

fn exceeds(x: &[f64], threshold: f64) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > threshold)
}

/// Integrates `steps` RK4 steps from `x0`, stopping at the first state that
/// is non-finite or exceeds `blowup_threshold` in ∞-norm.
pub fn rollout<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    h: f64,
    steps: usize,
    blowup_threshold: f64,
    system_tag: &str,
) -> Result<Trajectory> {
    check_dim(f.dim(), x0.len())?;
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    if !(blowup_threshold > 0.0) {
        return Err(Error::Config("blowup threshold must be positive".into()));
    }
    let n = x0.len();
    let mut traj = Trajectory::new(n, h, system_tag);
    traj.data.reserve((steps + 1) * n);
    if exceeds(x0, blowup_threshold) {
        traj.truncated_at = Some(0);
        return Ok(traj);
    }
    traj.data.extend_from_slice(x0);
    let mut ws = Rk4Workspace::new(n);
    let mut x = x0.to_vec();
    let mut next = vec![0.0; n];
    for k in 1..=steps {
        let ok = ws.step(f, &x, h, &mut next).is_ok();
        if !ok || exceeds(&next, blowup_threshold) {
            traj.truncated_at = Some(k);
            break;
        }
        traj.data.extend_from_slice(&next);
        std::mem::swap(&mut x, &mut next);
    }
    Ok(traj)
}

/// First index whose state is non-finite or exceeds `threshold` in ∞-norm.
pub fn detect_blowup(traj: &Trajectory, threshold: f64) -> Option<usize> {
    traj.states()
        .position(|s| exceeds(s, threshold))
        .or(traj.truncated_at)
}
