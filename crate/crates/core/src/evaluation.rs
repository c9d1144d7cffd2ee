//! Long-horizon rollout evaluation: boundedness verdicts, Fourier energy
//! spectra, Lyapunov energy histories and attractor containment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{rollout, Trajectory, VectorField, DEFAULT_BLOWUP_THRESHOLD};
use crate::lyapunov::QuadraticLyapunov;
use crate::model::Emulator;
use crate::systems::SystemSpec;
use crate::training::sample_box;

/// Allowed relative overshoot of max_k V(x_k) over max(V(x₀), c) for the
/// discrete-time boundedness check.
pub const TOL_BOUND: f64 = 0.05;

/// One-sided energy spectrum of a trajectory after dropping `discard` states.
///
/// Each coordinate is mean-removed, transformed, and |X_k|²/N is taken; bins
/// strictly between DC and Nyquist are doubled so the spectrum sums to the
/// time-domain energy Σ(x − x̄)². The result is averaged over coordinates and
/// has ⌊N/2⌋ + 1 bins for a window of N samples.
pub fn fourier_energy_spectrum(traj: &Trajectory, discard: usize) -> Result<Vec<f64>> {
    let per_dim = fourier_energy_spectra(traj, discard)?;
    let n_bins = per_dim[0].len();
    let mut avg = vec![0.0; n_bins];
    for s in &per_dim {
        for (a, v) in avg.iter_mut().zip(s) {
            *a += v / per_dim.len() as f64;
        }
    }
    Ok(avg)
}

/// Per-coordinate one-sided spectra (before averaging over coordinates).
pub fn fourier_energy_spectra(traj: &Trajectory, discard: usize) -> Result<Vec<Vec<f64>>> {
    if discard >= traj.len() {
        return Err(Error::InvalidSpectrum(format!(
            "discard {discard} leaves no samples from {}",
            traj.len()
        )));
    }
    let window = traj.len() - discard;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window);
    let n_bins = window / 2 + 1;
    let mut out = Vec::with_capacity(traj.dim());
    for i in 0..traj.dim() {
        let series: Vec<f64> = traj.states().skip(discard).map(|s| s[i]).collect();
        if series.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpectrum("non-finite samples in window".into()));
        }
        let mean = series.iter().sum::<f64>() / window as f64;
        let mut buf: Vec<Complex<f64>> = series.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
        fft.process(&mut buf);
        let spec = (0..n_bins)
            .map(|k| {
                let e = buf[k].norm_sqr() / window as f64;
                let mirrored = k != 0 && !(window % 2 == 0 && k == window / 2);
                if mirrored {
                    2.0 * e
                } else {
                    e
                }
            })
            .collect();
        out.push(spec);
    }
    Ok(out)
}

/// Elementwise mean of equally long spectra.
pub fn average_spectra(spectra: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = spectra
        .first()
        .ok_or_else(|| Error::InvalidSpectrum("no spectra to average".into()))?;
    if spectra.iter().any(|s| s.len() != first.len()) {
        return Err(Error::InvalidSpectrum("spectra differ in length".into()));
    }
    let mut avg = vec![0.0; first.len()];
    for s in spectra {
        for (a, v) in avg.iter_mut().zip(s) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= spectra.len() as f64);
    Ok(avg)
}

/// Sums consecutive groups of `width` bins (the last group may be shorter).
pub fn band_average(spectrum: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    spectrum.chunks(width).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// ‖pred − truth‖₁ / ‖truth‖₁.
pub fn spectrum_percentage_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidSpectrum(format!(
            "spectrum lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let denom: f64 = truth.iter().map(|v| v.abs()).sum();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::InvalidSpectrum("reference spectrum is zero or non-finite".into()));
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    if !num.is_finite() {
        return Err(Error::InvalidSpectrum("predicted spectrum is non-finite".into()));
    }
    Ok(num / denom)
}

/// V(x_k) along a trajectory.
pub fn energy_time_history(traj: &Trajectory, lyapunov: &QuadraticLyapunov) -> Result<Vec<f64>> {
    traj.states().map(|s| lyapunov.value(s)).collect()
}

/// Fraction of post-transient states inside M(c).
pub fn attractor_containment(truth: &Trajectory, lyapunov: &QuadraticLyapunov, discard: usize) -> Result<f64> {
    let window = truth.len().saturating_sub(discard);
    if window == 0 {
        return Err(Error::Usage("containment window is empty".into()));
    }
    let c = lyapunov.c();
    let mut inside = 0usize;
    for s in truth.states().skip(discard) {
        if lyapunov.value(s)? <= c {
            inside += 1;
        }
    }
    Ok(inside as f64 / window as f64)
}

/// Per-rollout boundedness summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub blowup_index: Option<usize>,
    pub initial_energy: f64,
    pub max_energy: f64,
    /// Largest ∞-norm reached before any truncation.
    pub max_abs: f64,
    /// max_k V(x_k) ≤ max(V(x₀), c)·(1 + tol) and no blowup.
    pub within_energy_bound: bool,
}

impl RolloutRecord {
    pub fn bounded(&self) -> bool {
        self.blowup_index.is_none()
    }
}

pub fn rollout_record(traj: &Trajectory, lyapunov: &QuadraticLyapunov, tol_bound: f64) -> Result<RolloutRecord> {
    let energy = energy_time_history(traj, lyapunov)?;
    let initial_energy = energy.first().copied().unwrap_or(f64::NAN);
    let max_energy = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bound = initial_energy.max(lyapunov.c()) * (1.0 + tol_bound);
    let max_abs = traj.as_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(RolloutRecord {
        blowup_index: traj.truncated_at,
        initial_energy,
        max_energy,
        max_abs,
        within_energy_bound: traj.truncated_at.is_none() && max_energy <= bound,
    })
}

/// Rolls out `field` from each initial condition (in parallel, results in
/// input order) and checks boundedness against V.
pub fn boundedness_report<F: VectorField + ?Sized>(
    field: &F,
    lyapunov: &QuadraticLyapunov,
    initial_conditions: &[Vec<f64>],
    steps: usize,
    h: f64,
    threshold: f64,
) -> Result<Vec<RolloutRecord>> {
    initial_conditions
        .par_iter()
        .map(|x0| {
            let traj = rollout(field, x0, h, steps, threshold, "eval")?;
            rollout_record(&traj, lyapunov, TOL_BOUND)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "defaults::n_traj")]
    pub n_traj: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::blowup_threshold")]
    pub blowup_threshold: f64,
    /// Fraction of each rollout dropped as transient.
    #[serde(default = "defaults::discard_fraction")]
    pub discard_fraction: f64,
    /// Adjacent-bin band width applied before comparing spectra.
    #[serde(default = "defaults::band_width")]
    pub band_width: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default)]
    pub init_box: Option<Vec<(f64, f64)>>,
    /// Also roll out the bare MLP f̂ of the checkpoint.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default = "defaults::boundary_samples")]
    pub boundary_samples: usize,
    /// Row stride for exported trajectory and energy series.
    #[serde(default = "defaults::export_stride")]
    pub export_stride: usize,
    #[serde(default)]
    pub check_certificate: bool,
}

mod defaults {
    pub fn n_traj() -> usize {
        25
    }
    pub fn steps() -> usize {
        50_000
    }
    pub fn blowup_threshold() -> f64 {
        super::DEFAULT_BLOWUP_THRESHOLD
    }
    pub fn discard_fraction() -> f64 {
        0.1
    }
    pub fn band_width() -> usize {
        super::DEFAULT_BAND_WIDTH
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn boundary_samples() -> usize {
        500
    }
    pub fn export_stride() -> usize {
        10
    }
}

pub const DEFAULT_BAND_WIDTH: usize = 256;

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_traj: defaults::n_traj(),
            steps: defaults::steps(),
            blowup_threshold: defaults::blowup_threshold(),
            discard_fraction: defaults::discard_fraction(),
            band_width: defaults::band_width(),
            seed: defaults::seed(),
            init_box: None,
            ablation: false,
            boundary_samples: defaults::boundary_samples(),
            export_stride: defaults::export_stride(),
            check_certificate: false,
        }
    }
}

impl EvalConfig {
    pub fn discard(&self) -> usize {
        ((self.steps + 1) as f64 * self.discard_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 || self.steps == 0 {
            return Err(Error::Config("eval needs n_traj >= 1 and steps >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.discard_fraction) {
            return Err(Error::Config("discard_fraction must be in [0, 1)".into()));
        }
        if !(self.blowup_threshold > 0.0) {
            return Err(Error::Config("blowup_threshold must be positive".into()));
        }
        Ok(())
    }

    /// Initial conditions for the evaluation ensemble.
    pub fn initial_conditions(&self, system: &SystemSpec) -> Result<Vec<Vec<f64>>> {
        let b = self.init_box.clone().unwrap_or_else(|| system.default_init_box());
        if b.len() != system.dim() {
            return Err(Error::Config("eval init_box dimension mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.n_traj).map(|_| sample_box(&b, &mut rng)).collect())
    }
}

/// Summary of one model's rollout ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub rollouts: Vec<RolloutRecord>,
    pub unbounded: usize,
    pub energy_bound_violations: usize,
    pub certificate_violations: usize,
    /// Band-averaged; `None` when any rollout blew up.
    pub spectrum_error: Option<f64>,
    /// Same comparison without band averaging.
    pub raw_spectrum_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub h: f64,
    pub steps: usize,
    pub discard: usize,
    pub level_c: f64,
    pub level_set_volume: f64,
    pub truth_unbounded: usize,
    /// Fraction of post-transient ground-truth states inside M(c), pooled over rollouts.
    pub containment: f64,
    /// Largest V over contained post-transient ground-truth states, relative to c.
    pub max_contained_energy_ratio: f64,
    /// The checkpoint as trained (projected unless it is an ablation checkpoint).
    pub model: ModelEval,
    pub model_projected: bool,
    pub ablation: Option<ModelEval>,
}

/// Series kept for export: the first rollout of each ensemble plus spectra.
#[derive(Clone, Debug, Default)]
pub struct EvalSeries {
    pub truth_spectrum: Vec<f64>,
    pub model_spectrum: Option<Vec<f64>>,
    pub ablation_spectrum: Option<Vec<f64>>,
    pub truth_trajectory: Option<Trajectory>,
    pub model_trajectory: Option<Trajectory>,
    pub ablation_trajectory: Option<Trajectory>,
}

struct Member {
    record: RolloutRecord,
    spectrum: Option<Vec<f64>>,
    trajectory: Option<Trajectory>,
}

fn run_ensemble<F: VectorField + ?Sized>(
    field: &F,
    lyapunov: &QuadraticLyapunov,
    ics: &[Vec<f64>],
    cfg: &EvalConfig,
    h: f64,
    threshold: f64,
    tag: &str,
) -> Result<Vec<Member>> {
    let discard = cfg.discard();
    ics.par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let traj = rollout(field, x0, h, cfg.steps, threshold, tag)?;
            let record = rollout_record(&traj, lyapunov, TOL_BOUND)?;
            let spectrum = if traj.truncated_at.is_none() {
                Some(fourier_energy_spectrum(&traj, discard)?)
            } else {
                None
            };
            Ok(Member {
                record,
                spectrum,
                trajectory: (i == 0).then_some(traj),
            })
        })
        .collect()
}

fn summarize(members: &[Member], truth_spectrum: &[f64], band_width: usize, cert: usize) -> Result<(ModelEval, Option<Vec<f64>>)> {
    let rollouts: Vec<RolloutRecord> = members.iter().map(|m| m.record.clone()).collect();
    let unbounded = rollouts.iter().filter(|r| !r.bounded()).count();
    let energy_bound_violations = rollouts.iter().filter(|r| !r.within_energy_bound).count();
    let spectrum = if unbounded == 0 {
        let spectra: Vec<Vec<f64>> = members.iter().filter_map(|m| m.spectrum.clone()).collect();
        Some(average_spectra(&spectra)?)
    } else {
        None
    };
    let spectrum_error = match &spectrum {
        Some(s) => Some(spectrum_percentage_error(
            &band_average(s, band_width),
            &band_average(truth_spectrum, band_width),
        )?),
        None => None,
    };
    let raw_spectrum_error = match &spectrum {
        Some(s) => Some(spectrum_percentage_error(s, truth_spectrum)?),
        None => None,
    };
    Ok((
        ModelEval {
            rollouts,
            unbounded,
            energy_bound_violations,
            certificate_violations: cert,
            spectrum_error,
            raw_spectrum_error,
        },
        spectrum,
    ))
}

/// Full evaluation of a checkpoint against the ground-truth system.
pub fn evaluate(system: &SystemSpec, emulator: &Emulator, h: f64, cfg: &EvalConfig) -> Result<(EvalReport, EvalSeries)> {
    cfg.validate()?;
    let ics = cfg.initial_conditions(system)?;
    let lyap = &emulator.lyapunov;
    let discard = cfg.discard();

    let truth = run_ensemble(system, lyap, &ics, cfg, h, cfg.blowup_threshold, &system.tag())?;
    let truth_unbounded = truth.iter().filter(|m| !m.record.bounded()).count();
    let truth_spectra: Vec<Vec<f64>> = truth.iter().filter_map(|m| m.spectrum.clone()).collect();
    let truth_spectrum = average_spectra(&truth_spectra)?;

    // containment is recomputed from fresh truth rollouts to avoid holding all trajectories
    let c = lyap.c();
    let (inside, total, max_inside) = ics
        .par_iter()
        .map(|x0| -> Result<(usize, usize, f64)> {
            let traj = rollout(system, x0, h, cfg.steps, cfg.blowup_threshold, "truth")?;
            let mut inside = 0usize;
            let mut max_inside = 0.0f64;
            let mut total = 0usize;
            for s in traj.states().skip(discard) {
                let v = lyap.value(s)?;
                total += 1;
                if v <= c {
                    inside += 1;
                    max_inside = max_inside.max(v);
                }
            }
            Ok((inside, total, max_inside))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0, 0, 0.0f64), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2.max(x.2)));

    let model_field = match emulator.field() {
        crate::model::EmulatorField::Projected(p) => {
            crate::model::EmulatorField::Projected(p.with_certificate_check(cfg.check_certificate))
        }
        bare => bare,
    };
    let model = run_ensemble(&model_field, lyap, &ics, cfg, h, cfg.blowup_threshold, "model")?;
    let (projected, model_spectrum) = summarize(
        &model,
        &truth_spectrum,
        cfg.band_width,
        model_field.certificate_violations(),
    )?;

    let (ablation, ablation_spectrum, ablation_trajectory) = if cfg.ablation {
        let bare = crate::model::EmulatorField::Bare(&emulator.mlp);
        let members = run_ensemble(&bare, lyap, &ics, cfg, h, cfg.blowup_threshold, "ablation")?;
        let (eval, spec) = summarize(&members, &truth_spectrum, cfg.band_width, 0)?;
        let traj = members.into_iter().next().and_then(|m| m.trajectory);
        (Some(eval), spec, traj)
    } else {
        (None, None, None)
    };

    let report = EvalReport {
        system: system.tag(),
        h,
        steps: cfg.steps,
        discard,
        level_c: c,
        level_set_volume: lyap.level_set_volume(),
        truth_unbounded,
        containment: inside as f64 / total.max(1) as f64,
        max_contained_energy_ratio: max_inside / c,
        model: projected,
        model_projected: emulator.projected,
        ablation,
    };
    let series = EvalSeries {
        truth_spectrum,
        model_spectrum,
        ablation_spectrum,
        truth_trajectory: truth.into_iter().next().and_then(|m| m.trajectory),
        model_trajectory: model.into_iter().next().and_then(|m| m.trajectory),
        ablation_trajectory,
    };
    Ok((report, series))
}
