//! The trained emulator: MLP f̂, Lyapunov function V, and whether the
//! stability projection is applied.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::integrator::VectorField;
use crate::lyapunov::QuadraticLyapunov;
use crate::net::tape::{Gradients, Tape, Var};
use crate::net::{MlpParams, MlpVars};
use crate::projection::{projected_field, projected_field_tape, LyapunovVars, ProjectedField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emulator {
    pub mlp: MlpParams,
    pub lyapunov: QuadraticLyapunov,
    /// When false the model is the bare MLP (ablation baseline).
    pub projected: bool,
}

/// Tape handles for a whole [`Emulator`].
pub struct EmulatorVars {
    pub mlp: MlpVars,
    pub lyapunov: LyapunovVars,
}

/// Vector field of an emulator, projected or not.
pub enum EmulatorField<'a> {
    Projected(ProjectedField<'a>),
    Bare(&'a MlpParams),
}

impl VectorField for EmulatorField<'_> {
    fn dim(&self) -> usize {
        match self {
            EmulatorField::Projected(p) => p.dim(),
            EmulatorField::Bare(m) => m.dim(),
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            EmulatorField::Projected(p) => p.eval(x, out),
            EmulatorField::Bare(m) => m.forward_into(x, out),
        }
    }
}

impl EmulatorField<'_> {
    pub fn certificate_violations(&self) -> usize {
        match self {
            EmulatorField::Projected(p) => p.certificate_violations(),
            EmulatorField::Bare(_) => 0,
        }
    }
}

impl Emulator {
    pub fn new(mlp: MlpParams, lyapunov: QuadraticLyapunov, projected: bool) -> Result<Self> {
        check_dim(mlp.dim(), lyapunov.dim())?;
        Ok(Emulator {
            mlp,
            lyapunov,
            projected,
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.dim()
    }

    pub fn field(&self) -> EmulatorField<'_> {
        if self.projected {
            EmulatorField::Projected(projected_field(&self.mlp, &self.lyapunov).expect("dimensions checked at construction"))
        } else {
            EmulatorField::Bare(&self.mlp)
        }
    }

    pub fn on_tape(&self, tape: &Tape) -> EmulatorVars {
        EmulatorVars {
            mlp: self.mlp.on_tape(tape),
            lyapunov: LyapunovVars::record(tape, &self.lyapunov),
        }
    }

    pub fn field_tape(&self, tape: &Tape, vars: &EmulatorVars, x: Var) -> Var {
        if self.projected {
            projected_field_tape(tape, &self.mlp, &vars.mlp, &vars.lyapunov, x)
        } else {
            self.mlp.forward_tape(tape, &vars.mlp, x)
        }
    }

    /// Number of trainable scalars: MLP, then L (full n×n), x₀, c_raw.
    pub fn num_params(&self) -> usize {
        let n = self.dim();
        self.mlp.num_params() + n * n + n + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.mlp.to_flat(&mut out);
        out.extend(self.lyapunov.l_raw.iter());
        out.extend(&self.lyapunov.center);
        out.push(self.lyapunov.c_raw);
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut pos = self.mlp.set_from_flat(flat);
        for v in self.lyapunov.l_raw.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
        for v in self.lyapunov.center.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
        self.lyapunov.c_raw = flat[pos];
    }

    pub fn grads_to_flat(vars: &EmulatorVars, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        MlpParams::grads_to_flat(&vars.mlp, grads, &mut out);
        out.extend(grads.get(vars.lyapunov.l_raw).iter());
        out.extend(grads.get(vars.lyapunov.center).iter());
        out.push(grads.get(vars.lyapunov.c_raw)[[0, 0]]);
        out
    }
}
