//! The unconstrained MLP vector field f̂ and the differentiation tape used
//! to train it.

pub mod tape;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use tape::{Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Weights and biases of f̂, plus fixed (non-trained) affine maps that put
/// inputs and outputs on unit scale.
///
/// `f̂(x) = out_scale ⊙ (W_L · σ(… σ(W_1 · ((x − in_shift) ⊙ in_scale) + b_1) …) + b_L)`.
/// Weights are stored `[fan_in × fan_out]` so a batch `X` maps as `X · W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array2<f64>>,
    pub activation: Activation,
    pub in_shift: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_scale: Vec<f64>,
}

/// Tape handles for one [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    in_shift: Var,
    in_scale: Var,
    out_scale: Var,
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

impl MlpParams {
    /// Deterministic initialization: weights ~ N(0, 1/fan_in), biases zero,
    /// identity normalization.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let (first, last) = (layer_sizes[0], *layer_sizes.last().unwrap());
        if first != last {
            return Err(Error::Config(format!(
                "input and output sizes must match the system dimension ({first} != {last})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            }));
            biases.push(Array2::zeros((1, fan_out)));
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation: Activation::Tanh,
            in_shift: vec![0.0; first],
            in_scale: vec![1.0; first],
            out_scale: vec![1.0; first],
        })
    }

    /// Sets the fixed input/output affine maps from data statistics.
    pub fn set_normalization(&mut self, in_shift: Vec<f64>, in_scale: Vec<f64>, out_scale: Vec<f64>) -> Result<()> {
        let n = self.dim();
        check_dim(n, in_shift.len())?;
        check_dim(n, in_scale.len())?;
        check_dim(n, out_scale.len())?;
        self.in_shift = in_shift;
        self.in_scale = in_scale;
        self.out_scale = out_scale;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let n_layers = self.layer_sizes.len();
        if n_layers < 2 || self.weights.len() != n_layers - 1 || self.biases.len() != n_layers - 1 {
            return Err(Error::Config("inconsistent MLP layer count".into()));
        }
        for (k, pair) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[k].dim() != (pair[0], pair[1]) || self.biases[k].dim() != (1, pair[1]) {
                return Err(Error::Config(format!("layer {k} has incompatible shapes")));
            }
        }
        let n = self.dim();
        if self.layer_sizes[n_layers - 1] != n
            || self.in_shift.len() != n
            || self.in_scale.len() != n
            || self.out_scale.len() != n
        {
            return Err(Error::Config("MLP input/output sizes disagree".into()));
        }
        let finite = self.weights.iter().chain(&self.biases).all(|a| a.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("MLP parameters".into()));
        }
        Ok(())
    }

    /// Plain forward pass for one state.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let mut cur: Vec<f64> = x
            .iter()
            .zip(&self.in_shift)
            .zip(&self.in_scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.as_slice().expect("contiguous bias").to_vec();
            let cols = w.ncols();
            let ws = w.as_slice().expect("contiguous weights");
            for (i, &xi) in cur.iter().enumerate() {
                let wrow = &ws[i * cols..(i + 1) * cols];
                for (acc, &wij) in next.iter_mut().zip(wrow) {
                    *acc += xi * wij;
                }
            }
            if k < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = next;
        }
        for ((o, v), s) in out.iter_mut().zip(&cur).zip(&self.out_scale) {
            *o = v * s;
        }
    }

    /// Records all parameters on `tape`.
    pub fn on_tape(&self, tape: &Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
            in_shift: tape.leaf(row(&self.in_shift)),
            in_scale: tape.leaf(row(&self.in_scale)),
            out_scale: tape.leaf(row(&self.out_scale)),
        }
    }

    /// Batched forward pass recorded on the tape; `x` is `[batch × dim]`.
    pub fn forward_tape(&self, tape: &Tape, vars: &MlpVars, x: Var) -> Var {
        let mut h = tape.mul_broadcast(tape.sub_broadcast(x, vars.in_shift), vars.in_scale);
        let last = vars.weights.len() - 1;
        for (k, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            h = tape.add_broadcast(tape.matmul(h, w), b);
            if k < last {
                h = tape.tanh(h);
            }
        }
        tape.mul_broadcast(h, vars.out_scale)
    }

    /// Flattened trainable parameters: each weight then bias, layer by layer.
    pub fn to_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }

    /// Inverse of [`to_flat`](Self::to_flat); returns the number of values consumed.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = flat[pos];
                pos += 1;
            }
        }
        pos
    }

    pub fn grads_to_flat(vars: &MlpVars, grads: &Gradients, out: &mut Vec<f64>) {
        for (&w, &b) in vars.weights.iter().zip(&vars.biases) {
            out.extend(grads.get(w).iter());
            out.extend(grads.get(b).iter());
        }
    }
}

/// Per-dimension mean and inverse standard deviation of a set of rows,
/// with a floor on the deviation.
pub(crate) fn column_stats(rows: &Array2<f64>, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let mean = rows.mean_axis(Axis(0)).expect("non-empty rows");
    let std = rows.std_axis(Axis(0), 0.0);
    (
        mean.to_vec(),
        std.iter().map(|s| 1.0 / s.max(floor)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = MlpParams::init(&[3, 16, 16, 3], 1).unwrap();
        let b = MlpParams::init(&[3, 16, 16, 3], 1).unwrap();
        let c = MlpParams::init(&[3, 16, 16, 3], 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn parameter_count_from_shapes() {
        let p = MlpParams::init(&[3, 128, 128, 128, 3], 0).unwrap();
        assert_eq!(p.num_params(), 3 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 3 + 3);
    }

    #[test]
    fn bad_layer_lists_are_config_errors() {
        assert!(matches!(MlpParams::init(&[], 0), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[3], 0), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[3, 0, 3], 0), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[3, 4, 2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut p = MlpParams::init(&[4, 8, 4], 3).unwrap();
        p.weights.iter_mut().for_each(|w| w.fill(0.0));
        assert_eq!(p.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut p = MlpParams::init(&[2, 2], 0).unwrap();
        p.weights[0] = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        p.biases[0] = ndarray::array![[0.5, -0.5]];
        // x · W + b with x = (1, -1): (1 - 3 + 0.5, 2 - 4 - 0.5)
        assert_eq!(p.forward(&[1.0, -1.0]).unwrap(), vec![-1.5, -2.5]);
    }

    #[test]
    fn forward_matches_independent_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = MlpParams::init(&[3, 7, 5, 3], 4).unwrap();
        p.biases.iter_mut().for_each(|b| b.mapv_inplace(|_| rng.random_range(-1.0..1.0)));
        p.set_normalization(vec![0.5, -1.0, 2.0], vec![0.1, 0.2, 0.3], vec![10.0, 20.0, 30.0]).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            // reference: explicit nested sums with weights indexed [out][in]
            let mut h: Vec<f64> = (0..3).map(|i| (x[i] - p.in_shift[i]) * p.in_scale[i]).collect();
            for (k, w) in p.weights.iter().enumerate() {
                let mut next = Vec::new();
                for j in 0..w.ncols() {
                    let mut s = p.biases[k][[0, j]];
                    for i in 0..w.nrows() {
                        s += w[[i, j]] * h[i];
                    }
                    next.push(if k + 1 < p.weights.len() { s.tanh() } else { s });
                }
                h = next;
            }
            let want: Vec<f64> = h.iter().zip(&p.out_scale).map(|(a, b)| a * b).collect();
            let got = p.forward(&x).unwrap();
            let tape = Tape::new();
            let vars = p.on_tape(&tape);
            let xv = tape.leaf(row(&x));
            let taped = tape.value(p.forward_tape(&tape, &vars, xv));
            for i in 0..3 {
                assert!((got[i] - want[i]).abs() < 1e-12 * want[i].abs().max(1.0));
                assert!((taped[[0, i]] - want[i]).abs() < 1e-12 * want[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let p = MlpParams::init(&[3, 4, 3], 0).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::InputShape { .. })));
    }

    #[test]
    fn flat_round_trip() {
        let p = MlpParams::init(&[3, 5, 3], 2).unwrap();
        let mut flat = Vec::new();
        p.to_flat(&mut flat);
        assert_eq!(flat.len(), p.num_params());
        let mut q = MlpParams::init(&[3, 5, 3], 9).unwrap();
        assert_eq!(q.set_from_flat(&flat), flat.len());
        assert_eq!(p, q);
    }
}
