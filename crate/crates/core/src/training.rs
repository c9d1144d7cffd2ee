//! Dataset generation, the multi-step prediction loss with volume
//! regularization, and the Adam training loop.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{rollout, Trajectory, VectorField, DEFAULT_BLOWUP_THRESHOLD};
use crate::lyapunov::{QuadraticLyapunov, DEFAULT_EPS_PD};
use crate::model::{Emulator, EmulatorVars};
use crate::net::tape::{Tape, Var};
use crate::net::{column_stats, MlpParams};
use crate::projection::certify;
use crate::systems::SystemSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "defaults::n_traj")]
    pub n_traj: usize,
    /// Steps per trajectory; each trajectory holds `traj_len + 1` states.
    #[serde(default = "defaults::traj_len")]
    pub traj_len: usize,
    #[serde(default = "defaults::h")]
    pub h: f64,
    /// Per-dimension sampling box for initial conditions; system default when absent.
    #[serde(default)]
    pub init_box: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::projected")]
    pub projected: bool,
    #[serde(default = "defaults::eps_pd")]
    pub eps_pd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub eps: f64,
    /// Learning rate at the last step relative to `learning_rate`, reached
    /// by cosine decay. 1 keeps the rate constant.
    #[serde(default = "defaults::final_lr_fraction")]
    pub final_lr_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Rollout horizon T of the prediction loss.
    #[serde(default = "defaults::rollout_t")]
    pub rollout_t: usize,
    #[serde(default = "defaults::lambda_vol")]
    pub lambda_vol: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    /// Divide Vol(M(c)) by the volume of the training data's bounding box,
    /// making `lambda_vol` independent of the state units.
    #[serde(default = "defaults::normalize_volume")]
    pub normalize_volume: bool,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: OptimConfig,
}

mod defaults {
    pub fn n_traj() -> usize {
        10
    }
    pub fn traj_len() -> usize {
        200
    }
    pub fn h() -> f64 {
        0.01
    }
    pub fn hidden() -> Vec<usize> {
        vec![128, 128, 128]
    }
    pub fn projected() -> bool {
        true
    }
    pub fn eps_pd() -> f64 {
        super::DEFAULT_EPS_PD
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn final_lr_fraction() -> f64 {
        1.0
    }
    pub fn rollout_t() -> usize {
        5
    }
    pub fn lambda_vol() -> f64 {
        1e-3
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn normalize_volume() -> bool {
        true
    }
    pub fn clip_norm() -> f64 {
        10.0
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_traj: defaults::n_traj(),
            traj_len: defaults::traj_len(),
            h: defaults::h(),
            init_box: None,
            seed: 0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: defaults::hidden(),
            projected: defaults::projected(),
            eps_pd: defaults::eps_pd(),
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: defaults::lr(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::adam_eps(),
            final_lr_fraction: defaults::final_lr_fraction(),
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            rollout_t: defaults::rollout_t(),
            lambda_vol: defaults::lambda_vol(),
            adam: AdamConfig::default(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            seed: 0,
            clip_norm: defaults::clip_norm(),
            normalize_volume: defaults::normalize_volume(),
        }
    }
}

impl DataConfig {
    pub fn init_box_for(&self, system: &SystemSpec) -> Result<Vec<(f64, f64)>> {
        let b = self.init_box.clone().unwrap_or_else(|| system.default_init_box());
        if b.len() != system.dim() {
            return Err(Error::Config(format!(
                "init_box has {} intervals, system dimension is {}",
                b.len(),
                system.dim()
            )));
        }
        if b.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Config("init_box intervals must be finite with lo <= hi".into()));
        }
        Ok(b)
    }
}

impl TrainingConfig {
    pub fn new(system: SystemSpec) -> Self {
        TrainingConfig {
            system,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: OptimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.data.init_box_for(&self.system)?;
        let t = &self.training;
        if !(self.data.h > 0.0) {
            return Err(Error::Config("h must be positive".into()));
        }
        if t.rollout_t < 1 {
            return Err(Error::Config("rollout_t must be at least 1".into()));
        }
        if self.data.traj_len <= t.rollout_t {
            return Err(Error::Config(format!(
                "traj_len ({}) must exceed rollout_t ({})",
                self.data.traj_len, t.rollout_t
            )));
        }
        if !(t.lambda_vol >= 0.0) {
            return Err(Error::Config("lambda_vol must be non-negative".into()));
        }
        if t.batch_size == 0 || self.data.n_traj == 0 {
            return Err(Error::Config("batch_size and n_traj must be positive".into()));
        }
        if !(self.model.eps_pd > 0.0) {
            return Err(Error::Config("eps_pd must be positive".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.adam.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let n = self.system.dim();
        let mut sizes = vec![n];
        sizes.extend(&self.model.hidden);
        sizes.push(n);
        sizes
    }
}

/// Ground-truth trajectories sharing one sampling period.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub system_tag: String,
    pub h: f64,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Config("dataset needs at least one trajectory".into()))?;
        let (h, dim, tag) = (first.h, first.dim(), first.system_tag.clone());
        for t in &trajectories {
            if t.dim() != dim || t.h != h {
                return Err(Error::Config("dataset trajectories disagree in dimension or h".into()));
            }
            if t.as_flat().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset contains non-finite states".into()));
            }
        }
        Ok(Dataset {
            trajectories,
            system_tag: tag,
            h,
        })
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.trajectories.iter().flat_map(|t| t.states())
    }

    /// All valid `(trajectory, start)` pairs for snippets of `horizon` steps.
    pub fn snippet_index(&self, horizon: usize) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len().saturating_sub(horizon)).map(move |s| (i, s)))
            .collect()
    }

    /// Mean squared one-step increment ‖x_{k+1} − x_k‖².
    /// Product of the per-coordinate data ranges (1 if any range is zero).
    pub fn bounding_box_volume(&self) -> f64 {
        let (lo, hi) = bounding_box(self);
        let vol: f64 = lo.iter().zip(&hi).map(|(l, h)| h - l).product();
        if vol > 0.0 && vol.is_finite() {
            vol
        } else {
            1.0
        }
    }

    pub fn one_step_variance(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in &self.trajectories {
            for k in 1..t.len() {
                sum += t
                    .state(k)
                    .iter()
                    .zip(t.state(k - 1))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                count += 1;
            }
        }
        sum / count.max(1) as f64
    }
}

/// Integrates `n_traj` ground-truth trajectories from initial conditions
/// drawn uniformly in the configured box.
pub fn generate_dataset(system: &SystemSpec, data: &DataConfig) -> Result<Dataset> {
    system.validate()?;
    let init_box = data.init_box_for(system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    let initial: Vec<Vec<f64>> = (0..data.n_traj)
        .map(|_| sample_box(&init_box, &mut rng))
        .collect();
    generate_from(system, &initial, data.h, data.traj_len)
}

pub(crate) fn sample_box(init_box: &[(f64, f64)], rng: &mut impl Rng) -> Vec<f64> {
    init_box
        .iter()
        .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

pub(crate) fn generate_from<F: VectorField + ?Sized>(
    field: &F,
    initial: &[Vec<f64>],
    h: f64,
    steps: usize,
) -> Result<Dataset> {
    let tag = format!("dim{}", field.dim());
    generate_tagged(field, initial, h, steps, &tag)
}

pub(crate) fn generate_tagged<F: VectorField + ?Sized>(
    field: &F,
    initial: &[Vec<f64>],
    h: f64,
    steps: usize,
    tag: &str,
) -> Result<Dataset> {
    let mut trajectories = Vec::with_capacity(initial.len());
    for (i, x0) in initial.iter().enumerate() {
        let traj = rollout(field, x0, h, steps, DEFAULT_BLOWUP_THRESHOLD, tag)?;
        if let Some(step) = traj.truncated_at {
            return Err(Error::Generation { trajectory: i, step });
        }
        trajectories.push(traj);
    }
    Dataset::new(trajectories)
}

/// Generates a dataset tagged with the system description.
pub fn generate_system_dataset(system: &SystemSpec, data: &DataConfig) -> Result<Dataset> {
    let mut ds = generate_dataset(system, data)?;
    let tag = system.tag();
    ds.trajectories.iter_mut().for_each(|t| t.system_tag = tag.clone());
    ds.system_tag = tag;
    Ok(ds)
}

/// A minibatch of snippets: start states and the T following targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub starts: Array2<f64>,
    pub targets: Vec<Array2<f64>>,
}

impl Batch {
    pub fn from_snippets(dataset: &Dataset, snippets: &[(usize, usize)], horizon: usize) -> Self {
        let n = dataset.dim();
        let b = snippets.len();
        let gather = |offset: usize| {
            Array2::from_shape_fn((b, n), |(r, i)| {
                let (t, s) = snippets[r];
                dataset.trajectories[t].state(s + offset)[i]
            })
        };
        Batch {
            starts: gather(0),
            targets: (1..=horizon).map(gather).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.starts.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.targets.len()
    }
}

/// One RK4 step of the emulator field on the tape.
pub fn rk4_step_tape(tape: &Tape, emulator: &Emulator, vars: &EmulatorVars, x: Var, h: f64) -> Var {
    let f = |y: Var| emulator.field_tape(tape, vars, y);
    let k1 = f(x);
    let k2 = f(tape.add(x, tape.scale(k1, 0.5 * h)));
    let k3 = f(tape.add(x, tape.scale(k2, 0.5 * h)));
    let k4 = f(tape.add(x, tape.scale(k3, h)));
    let sum = tape.add(tape.add(k1, k4), tape.scale(tape.add(k2, k3), 2.0));
    tape.add(x, tape.scale(sum, h / 6.0))
}

/// (1/NT) Σᵢ Σₖ ‖x_k⁽ⁱ⁾ − x̂_k⁽ⁱ⁾‖² over T-step RK4 rollouts of the emulator.
pub fn rollout_loss(tape: &Tape, emulator: &Emulator, vars: &EmulatorVars, batch: &Batch, h: f64) -> Result<Var> {
    if batch.is_empty() || batch.horizon() == 0 {
        return Err(Error::Usage("rollout loss needs a non-empty batch with T >= 1".into()));
    }
    let mut x = tape.leaf(batch.starts.clone());
    let mut total: Option<Var> = None;
    for target in &batch.targets {
        x = rk4_step_tape(tape, emulator, vars, x, h);
        let diff = tape.sub(x, tape.leaf(target.clone()));
        let sq = tape.sum_all(tape.square(diff));
        total = Some(match total {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
    }
    let loss = tape.scale(total.expect("horizon >= 1"), 1.0 / (batch.len() * batch.horizon()) as f64);
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        let value_rows = tape.value(x);
        let snippet = value_rows
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::NonFiniteLoss { snippet });
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub prediction: Var,
    pub volume: Var,
}

/// Prediction loss plus λ·Vol(M(c)). The bare-MLP ablation has no level
/// set in its dynamics and skips the volume term.
pub fn total_loss(
    tape: &Tape,
    emulator: &Emulator,
    vars: &EmulatorVars,
    batch: &Batch,
    h: f64,
    lambda_vol: f64,
) -> Result<LossParts> {
    let prediction = rollout_loss(tape, emulator, vars, batch, h)?;
    let volume = vars.lyapunov.volume(tape);
    let total = if emulator.projected && lambda_vol != 0.0 {
        tape.add(prediction, tape.scale(volume, lambda_vol))
    } else {
        prediction
    };
    Ok(LossParts {
        total,
        prediction,
        volume,
    })
}

/// Loss value and flattened gradient (ordering of [`Emulator::to_flat`]).
pub fn loss_and_grad(emulator: &Emulator, batch: &Batch, h: f64, lambda_vol: f64) -> Result<(f64, f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars = emulator.on_tape(&tape);
    let parts = total_loss(&tape, emulator, &vars, batch, h, lambda_vol)?;
    let grads = tape.grad(parts.total)?;
    Ok((
        tape.scalar_value(parts.total),
        tape.scalar_value(parts.prediction),
        Emulator::grads_to_flat(&vars, &grads),
    ))
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// ‖a − d‖₂ / ‖d‖₂ over the checked coordinates.
    pub relative_error: f64,
    /// Largest per-coordinate relative error.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates excluded because a ±step perturbation moves a ReLU
    /// argument across (or onto) its kink.
    pub skipped: usize,
}

fn loss_with_kinks(emulator: &Emulator, batch: &Batch, h: f64, lambda_vol: f64) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars = emulator.on_tape(&tape);
    let parts = total_loss(&tape, emulator, &vars, batch, h, lambda_vol)?;
    Ok((tape.scalar_value(parts.total), tape.relu_inputs()))
}

/// Compares the tape gradient of the total loss with central differences
/// of width `step` in every parameter coordinate.
///
/// Reports the norm-wise relative error of the whole gradient and the
/// largest per-coordinate error |a − d| / max(|a|, |d|, `floor`).
/// Coordinates are skipped when the perturbation flips the sign of a ReLU
/// argument or moves one whose magnitude is below `kink_tol`.
pub fn gradient_check(
    emulator: &Emulator,
    batch: &Batch,
    h: f64,
    lambda_vol: f64,
    step: f64,
    kink_tol: f64,
    floor: f64,
) -> Result<GradientCheck> {
    let (_, _, grads) = loss_and_grad(emulator, batch, h, lambda_vol)?;
    let (_, base_kinks) = loss_with_kinks(emulator, batch, h, lambda_vol)?;
    let params = emulator.to_flat();
    let mut probe = emulator.clone();
    let mut diff2 = 0.0;
    let mut fd2 = 0.0;
    let mut report = GradientCheck {
        relative_error: 0.0,
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for j in 0..params.len() {
        let mut eval = |delta: f64| -> Result<(f64, Vec<f64>)> {
            let mut p = params.clone();
            p[j] += delta;
            probe.set_from_flat(&p);
            loss_with_kinks(&probe, batch, h, lambda_vol)
        };
        let (up, up_kinks) = eval(step)?;
        let (down, down_kinks) = eval(-step)?;
        let crosses = base_kinks.iter().zip(&up_kinks).zip(&down_kinks).any(|((&b, &u), &d)| {
            let moved = u != b || d != b;
            (b > 0.0) != (u > 0.0) || (b > 0.0) != (d > 0.0) || (moved && b.abs() < kink_tol)
        });
        if crosses {
            report.skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * step);
        let denom = grads[j].abs().max(fd.abs()).max(floor);
        let err = if denom > 0.0 { (grads[j] - fd).abs() / denom } else { 0.0 };
        report.max_relative_error = report.max_relative_error.max(err);
        report.checked += 1;
        diff2 += (grads[j] - fd).powi(2);
        fd2 += fd * fd;
    }
    report.relative_error = if fd2 > 0.0 { (diff2 / fd2).sqrt() } else { diff2.sqrt() };
    Ok(report)
}

pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr_scale: f64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr_scale: 1.0,
        }
    }

    /// Cosine schedule from 1 down to `final_lr_fraction` as `progress` goes 0 → 1.
    pub fn set_progress(&mut self, progress: f64) {
        let f = self.config.final_lr_fraction;
        let p = progress.clamp(0.0, 1.0);
        self.lr_scale = f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let learning_rate = learning_rate * self.lr_scale;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= learning_rate * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_prediction_loss: f64,
    pub volume: f64,
    pub level_c: f64,
    pub certificate_failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub emulator: Emulator,
    pub curve: Vec<EpochRecord>,
}

/// Initial emulator: seeded MLP with data-derived normalization and a
/// Lyapunov level set enclosing the data.
pub fn init_emulator(config: &TrainingConfig, dataset: &Dataset) -> Result<Emulator> {
    let n = dataset.dim();
    if n != config.system.dim() {
        return Err(Error::InputShape {
            expected: config.system.dim(),
            got: n,
        });
    }
    let mut mlp = MlpParams::init(&config.layer_sizes(), config.training.seed)?;
    let states: Vec<f64> = dataset.states().flatten().copied().collect();
    let states = Array2::from_shape_vec((states.len() / n, n), states).expect("rectangular");
    let (mean, inv_std) = column_stats(&states, 1e-6);
    let mut increments = Vec::new();
    for t in &dataset.trajectories {
        for k in 1..t.len() {
            increments.extend(t.state(k).iter().zip(t.state(k - 1)).map(|(a, b)| (a - b) / dataset.h));
        }
    }
    let increments = Array2::from_shape_vec((increments.len() / n, n), increments).expect("rectangular");
    let (_, inv_rate) = column_stats(&increments, 1e-6);
    mlp.set_normalization(mean, inv_std, inv_rate.iter().map(|s| 1.0 / s).collect())?;
    let lyapunov = QuadraticLyapunov::init_from_states(dataset.states(), n, config.model.eps_pd)?;
    Emulator::new(mlp, lyapunov, config.model.projected)
}

/// Minibatch Adam over uniformly sampled snippets (with replacement).
pub fn train(config: &TrainingConfig, dataset: &Dataset) -> Result<TrainedModel> {
    train_from(config, dataset, init_emulator(config, dataset)?)
}

pub fn train_from(config: &TrainingConfig, dataset: &Dataset, mut emulator: Emulator) -> Result<TrainedModel> {
    config.validate()?;
    if (dataset.h - config.data.h).abs() > 1e-15 * config.data.h {
        return Err(Error::Config(format!(
            "dataset h = {} disagrees with configured h = {}",
            dataset.h, config.data.h
        )));
    }
    let opt = &config.training;
    let snippets = dataset.snippet_index(opt.rollout_t);
    if snippets.is_empty() {
        return Err(Error::Config("trajectories are too short for the rollout horizon".into()));
    }
    let iters_per_epoch = snippets.len().div_ceil(opt.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5eed_0f_7a1e);
    let mut params = emulator.to_flat();
    let mut adam = Adam::new(opt.adam.clone(), params.len());
    let mut curve = Vec::with_capacity(opt.epochs);
    let mut consecutive_bad = 0usize;
    let (lo, hi) = bounding_box(dataset);
    let volume_weight = if opt.normalize_volume {
        opt.lambda_vol / dataset.bounding_box_volume()
    } else {
        opt.lambda_vol
    };

    let total_iters = (opt.epochs * iters_per_epoch) as f64;
    for epoch in 1..=opt.epochs {
        let mut loss_sum = 0.0;
        let mut pred_sum = 0.0;
        let mut count = 0usize;
        for it in 0..iters_per_epoch {
            adam.set_progress(((epoch - 1) * iters_per_epoch + it) as f64 / total_iters);
            let picks: Vec<(usize, usize)> = (0..opt.batch_size)
                .map(|_| snippets[rng.random_range(0..snippets.len())])
                .collect();
            let batch = Batch::from_snippets(dataset, &picks, opt.rollout_t);
            let step = loss_and_grad(&emulator, &batch, dataset.h, volume_weight);
            let (loss, pred, mut grads) = match step {
                Ok(v) if v.0.is_finite() && v.2.iter().all(|g| g.is_finite()) => v,
                Ok(_) | Err(Error::NonFiniteLoss { .. }) => {
                    consecutive_bad += 1;
                    if consecutive_bad >= 10 {
                        return Err(Error::TrainingDiverged { epoch });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            consecutive_bad = 0;
            clip_global_norm(&mut grads, opt.clip_norm);
            adam.step(&mut params, &grads);
            emulator.set_from_flat(&params);
            loss_sum += loss;
            pred_sum += pred;
            count += 1;
        }
        let certificate_failures = if emulator.projected {
            spot_check_certificate(&emulator, &lo, &hi, &mut rng)
        } else {
            0
        };
        debug_assert_eq!(certificate_failures, 0);
        curve.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / count.max(1) as f64,
            mean_prediction_loss: pred_sum / count.max(1) as f64,
            volume: emulator.lyapunov.level_set_volume(),
            level_c: emulator.lyapunov.c(),
            certificate_failures,
        });
        log::debug!(
            "epoch {epoch}: loss {:.4e} pred {:.4e} vol {:.4e}",
            loss_sum / count.max(1) as f64,
            pred_sum / count.max(1) as f64,
            emulator.lyapunov.level_set_volume()
        );
    }
    Ok(TrainedModel { emulator, curve })
}

fn bounding_box(dataset: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let n = dataset.dim();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for s in dataset.states() {
        for i in 0..n {
            lo[i] = lo[i].min(s[i]);
            hi[i] = hi[i].max(s[i]);
        }
    }
    (lo, hi)
}

/// Certificate check on 100 states drawn from three times the data box.
fn spot_check_certificate(emulator: &Emulator, lo: &[f64], hi: &[f64], rng: &mut impl Rng) -> usize {
    let crate::model::EmulatorField::Projected(field) = emulator.field() else {
        return 0;
    };
    let mut failures = 0;
    for _ in 0..100 {
        let x: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| {
                let mid = 0.5 * (l + h);
                let half = 1.5 * (h - l) + 1e-9;
                rng.random_range(mid - half..mid + half)
            })
            .collect();
        match field.evaluate(&x) {
            Ok(out) if certify(&out) => {}
            _ => failures += 1,
        }
    }
    failures
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::rk4_step;
    use crate::net::tape::softplus_inverse;

    fn small_config(system: SystemSpec) -> TrainingConfig {
        let mut cfg = TrainingConfig::new(system);
        cfg.model.hidden = vec![8, 8];
        cfg.data.n_traj = 2;
        cfg.data.traj_len = 20;
        cfg.training.rollout_t = 2;
        cfg.training.batch_size = 4;
        cfg.training.epochs = 2;
        cfg
    }

    #[test]
    fn dataset_shapes_follow_protocol() {
        let cfg = TrainingConfig::new(SystemSpec::lorenz63());
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        assert_eq!(ds.trajectories.len(), 10);
        assert!(ds.trajectories.iter().all(|t| t.len() == 201 && t.dim() == 3));

        let mut cfg = TrainingConfig::new(SystemSpec::lorenz96());
        cfg.data.n_traj = 4;
        cfg.data.traj_len = 500;
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        assert_eq!(ds.trajectories.len(), 4);
        assert!(ds.trajectories.iter().all(|t| t.len() == 501 && t.dim() == 5));
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = TrainingConfig::new(SystemSpec::truncated_ks());
        let a = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let b = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergent_truth_is_generation_error() {
        // ν = 0.03 leaves every truncated-KS mode unstable
        let system = SystemSpec::TruncatedKs { nu: 0.03, modes: 4 };
        let data = DataConfig {
            n_traj: 1,
            traj_len: 2000,
            ..DataConfig::default()
        };
        assert!(matches!(
            generate_dataset(&system, &data),
            Err(Error::Generation { trajectory: 0, .. })
        ));
    }

    #[test]
    fn t1_loss_is_one_step_mse() {
        let cfg = small_config(SystemSpec::lorenz63());
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let emu = init_emulator(&cfg, &ds).unwrap();
        let snippets = [(0, 3), (1, 7)];
        let batch = Batch::from_snippets(&ds, &snippets, 1);
        let tape = Tape::new();
        let vars = emu.on_tape(&tape);
        let loss = tape.scalar_value(rollout_loss(&tape, &emu, &vars, &batch, ds.h).unwrap());
        let field = emu.field();
        let mut want = 0.0;
        for &(t, s) in &snippets {
            let pred = rk4_step(&field, ds.trajectories[t].state(s), ds.h).unwrap();
            want += pred
                .iter()
                .zip(ds.trajectories[t].state(s + 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        want /= 2.0;
        assert!((loss - want).abs() < 1e-12 * want.max(1.0), "{loss} vs {want}");
    }

    #[test]
    fn lambda_zero_total_equals_prediction() {
        let cfg = small_config(SystemSpec::lorenz96());
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let emu = init_emulator(&cfg, &ds).unwrap();
        let batch = Batch::from_snippets(&ds, &[(0, 0), (1, 4)], 2);
        let (total, pred, _) = loss_and_grad(&emu, &batch, ds.h, 0.0).unwrap();
        assert_eq!(total, pred);
    }

    #[test]
    fn larger_level_gives_larger_total_loss() {
        let cfg = small_config(SystemSpec::lorenz63());
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let mut emu = init_emulator(&cfg, &ds).unwrap();
        // huge level so the projection is inactive in both models
        emu.lyapunov.c_raw = 1e3;
        let mut bigger = emu.clone();
        bigger.lyapunov.c_raw = 2e3;
        let batch = Batch::from_snippets(&ds, &[(0, 0), (1, 4)], 2);
        let (a, pa, _) = loss_and_grad(&emu, &batch, ds.h, 1.0).unwrap();
        let (b, pb, _) = loss_and_grad(&bigger, &batch, ds.h, 1.0).unwrap();
        assert_eq!(pa, pb);
        assert!(b > a);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut cfg = small_config(SystemSpec::lorenz63());
        cfg.training.epochs = 0;
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let init = init_emulator(&cfg, &ds).unwrap();
        let trained = train(&cfg, &ds).unwrap();
        assert_eq!(trained.emulator, init);
        assert!(trained.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config(SystemSpec::lorenz63());
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.emulator, b.emulator);
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.iter().all(|r| r.certificate_failures == 0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(SystemSpec::lorenz63());
        cfg.training.rollout_t = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(SystemSpec::lorenz63());
        cfg.data.traj_len = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(SystemSpec::lorenz63());
        cfg.training.lambda_vol = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(SystemSpec::lorenz63());
        cfg.data.init_box = Some(vec![(0.0, 1.0)]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = AdamConfig {
            learning_rate: 1.0,
            final_lr_fraction: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, 1);
        let mut lr_at = |p: f64| {
            adam.set_progress(p);
            adam.lr_scale
        };
        assert_eq!(lr_at(0.0), 1.0);
        assert!((lr_at(0.5) - 0.55).abs() < 1e-15);
        assert!((lr_at(1.0) - 0.1).abs() < 1e-15);
        let mut constant = Adam::new(AdamConfig::default(), 1);
        constant.set_progress(0.7);
        assert_eq!(constant.lr_scale, 1.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            2,
        );
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 4.0 * p[1]];
            adam.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }

    fn gradient_draw(seed: u64) -> (Emulator, Batch, f64) {
        let mut cfg = small_config(SystemSpec::lorenz63());
        cfg.data.seed = seed;
        cfg.training.seed = seed;
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let mut em = init_emulator(&cfg, &ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = em.to_flat();
        for v in p.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        em.set_from_flat(&p);
        let picks: Vec<(usize, usize)> = (0..4).map(|_| (rng.random_range(0..2), rng.random_range(0..15))).collect();
        let batch = Batch::from_snippets(&ds, &picks, 3);
        // put the level set through the batch so both projection branches occur
        let mut vals: Vec<f64> = ds.states().map(|s| em.lyapunov.value(s).unwrap()).collect();
        vals.sort_by(f64::total_cmp);
        em.lyapunov.c_raw = softplus_inverse(vals[vals.len() / 2]);
        (em, batch, 1.0 / ds.bounding_box_volume())
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        let mut mixed = 0;
        for seed in 0..20 {
            let (em, batch, lambda) = gradient_draw(seed);
            let (_, kinks) = loss_with_kinks(&em, &batch, 0.01, lambda).unwrap();
            let active = kinks.iter().filter(|&&k| k > 0.0).count();
            mixed += (active > 0 && active < kinks.len()) as usize;
            let check = gradient_check(&em, &batch, 0.01, lambda, 1e-5, 1e-6, 0.0).unwrap();
            worst = worst.max(check.max_relative_error).max(check.relative_error);
            skipped += check.skipped;
            assert!(check.checked > 100);
        }
        assert!(skipped < 20 * 10);
        assert!(mixed >= 10, "only {mixed} draws exercise both projection branches");
        assert!(worst < 1e-5, "max relative error {worst:e}");
    }

    #[test]
    fn level_gradient_of_volume_term() {
        let (mut em, batch, _) = gradient_draw(3);
        // make the projection inactive so the prediction part is frozen in c
        em.lyapunov.c_raw = softplus_inverse(1e9);
        em.lyapunov.c_raw = 25.0;
        let tape = Tape::new();
        let vars = em.on_tape(&tape);
        let parts = total_loss(&tape, &em, &vars, &batch, 0.01, 1.0).unwrap();
        let grads = tape.grad(parts.total).unwrap();
        let got = grads.get(vars.lyapunov.c_raw)[[0, 0]];
        let c = em.lyapunov.c();
        let n = em.dim() as f64;
        let sigmoid = 1.0 / (1.0 + (-em.lyapunov.c_raw).exp());
        let analytic = em.lyapunov.level_set_volume() * n / (2.0 * c) * sigmoid;
        let vol_at = |c_raw: f64| {
            let mut v = em.lyapunov.clone();
            v.c_raw = c_raw;
            v.level_set_volume()
        };
        let step = 1e-5;
        let fd = (vol_at(em.lyapunov.c_raw + step) - vol_at(em.lyapunov.c_raw - step)) / (2.0 * step);
        assert!((got - analytic).abs() <= 1e-10 * analytic.abs());
        assert!((got - fd).abs() <= 1e-6 * fd.abs(), "{got} vs {fd}");
    }

    #[test]
    fn two_step_loss_matches_hand_unrolled_rk4() {
        let (em, _, _) = gradient_draw(8);
        let mut cfg = small_config(SystemSpec::lorenz63());
        cfg.data.seed = 8;
        let ds = generate_system_dataset(&cfg.system, &cfg.data).unwrap();
        let batch = Batch::from_snippets(&ds, &[(0, 3), (1, 7)], 2);
        let tape = Tape::new();
        let vars = em.on_tape(&tape);
        let loss = tape.scalar_value(rollout_loss(&tape, &em, &vars, &batch, 0.01).unwrap());

        let field = em.field();
        let h = 0.01;
        let f = |x: &[f64]| {
            let mut out = vec![0.0; 3];
            field.eval(x, &mut out);
            out
        };
        let axpy = |x: &[f64], k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + a * k).collect() };
        let mut sum = 0.0;
        for (t, s) in [(0usize, 3usize), (1, 7)] {
            let mut x = ds.trajectories[t].state(s).to_vec();
            for k in 1..=2 {
                let k1 = f(&x);
                let k2 = f(&axpy(&x, &k1, h / 2.0));
                let k3 = f(&axpy(&x, &k2, h / 2.0));
                let k4 = f(&axpy(&x, &k3, h));
                x = (0..3).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
                let target = ds.trajectories[t].state(s + k);
                sum += x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        let want = sum / 4.0;
        assert!((loss - want).abs() <= 1e-12 * want.abs(), "{loss} vs {want}");
    }
}
