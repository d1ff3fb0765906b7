//! Sliding-window Gaussian-process speed forecasting.
//!
//! A zero-mean GP with an RBF kernel is fitted to the last five equally
//! spaced speed samples after removing their mean. Hyperparameters are chosen
//! by maximizing the log marginal likelihood with a fixed multi-start
//! gradient ascent, so the same window always yields the same model.

use nalgebra::{Cholesky, Const, DMatrix, SMatrix, SVector};

use crate::error::{Error, Result};

/// Number of samples in the training window.
pub const WINDOW_LEN: usize = 5;
/// Default relative diagonal jitter.
pub const DEFAULT_JITTER: f64 = 1e-8;

type Mat5 = SMatrix<f64, WINDOW_LEN, WINDOW_LEN>;
type Vec5 = SVector<f64, WINDOW_LEN>;

// Box for the log-parameter search, in (ln σ_f², ln ℓ).
const LN_VAR_MIN: f64 = -18.420680743952367; // ln 1e-8
const LN_VAR_MAX: f64 = 9.210340371976184; // ln 1e4
const LN_SCALE_MAX: f64 = 3.912023005428146; // ln 50 s
const MAX_ASCENT_ITERS: usize = 100;

/// RBF kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpHyperParams {
    /// σ_f² in (m/s)².
    pub signal_variance: f64,
    /// ℓ in seconds.
    pub length_scale: f64,
    /// Relative jitter λ; the diagonal receives `λ·tr(K)/n`.
    pub jitter: f64,
}

impl GpHyperParams {
    pub fn new(signal_variance: f64, length_scale: f64) -> Self {
        Self {
            signal_variance,
            length_scale,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "jitter must be non-negative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    /// Absolute diagonal jitter `λ·tr(K)/n`; the RBF diagonal is σ_f².
    pub fn absolute_jitter(&self) -> f64 {
        self.jitter * self.signal_variance
    }

    fn from_log(theta: [f64; 2], jitter: f64) -> Self {
        Self {
            signal_variance: theta[0].exp(),
            length_scale: theta[1].exp(),
            jitter,
        }
    }
}

/// Squared-exponential covariance between two time instants.
pub fn rbf_kernel(t1: f64, t2: f64, hp: &GpHyperParams) -> f64 {
    let r = t1 - t2;
    hp.signal_variance * (-(r * r) / (2.0 * hp.length_scale * hp.length_scale)).exp()
}

/// Five equally spaced `(time, speed)` samples, oldest first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedWindow {
    pub times: [f64; WINDOW_LEN],
    pub speeds: [f64; WINDOW_LEN],
}

impl SpeedWindow {
    pub fn new(times: [f64; WINDOW_LEN], speeds: [f64; WINDOW_LEN]) -> Result<Self> {
        if times.iter().chain(speeds.iter()).any(|x| !x.is_finite()) {
            return Err(Error::DegenerateWindow("non-finite sample".into()));
        }
        let spacing = times[1] - times[0];
        if spacing <= 0.0 {
            return Err(Error::DegenerateWindow(
                "times must be strictly increasing".into(),
            ));
        }
        for w in times.windows(2) {
            let dt = w[1] - w[0];
            if dt <= 0.0 {
                return Err(Error::DegenerateWindow(
                    "times must be strictly increasing".into(),
                ));
            }
            if (dt - spacing).abs() > 1e-6 * spacing.max(1e-9) + 1e-9 {
                return Err(Error::DegenerateWindow("samples are not equally spaced".into()));
            }
        }
        Ok(Self { times, speeds })
    }

    /// Window ending at `t_last` with the given spacing.
    pub fn ending_at(t_last: f64, spacing: f64, speeds: [f64; WINDOW_LEN]) -> Result<Self> {
        let mut times = [0.0; WINDOW_LEN];
        for (i, t) in times.iter_mut().enumerate() {
            *t = t_last - spacing * (WINDOW_LEN - 1 - i) as f64;
        }
        Self::new(times, speeds)
    }

    pub fn mean(&self) -> f64 {
        self.speeds.iter().sum::<f64>() / WINDOW_LEN as f64
    }

    pub fn span(&self) -> f64 {
        self.times[WINDOW_LEN - 1] - self.times[0]
    }

    pub fn spacing(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn last_time(&self) -> f64 {
        self.times[WINDOW_LEN - 1]
    }

    fn residuals(&self, offset: f64) -> Vec5 {
        Vec5::from_fn(|i, _| self.speeds[i] - offset)
    }
}

fn kernel_matrix(times: &[f64; WINDOW_LEN], hp: &GpHyperParams) -> Mat5 {
    let jitter = hp.absolute_jitter();
    Mat5::from_fn(|i, j| {
        let k = rbf_kernel(times[i], times[j], hp);
        if i == j {
            k + jitter
        } else {
            k
        }
    })
}

fn factor(times: &[f64; WINDOW_LEN], hp: &GpHyperParams) -> Result<Cholesky<f64, Const<WINDOW_LEN>>> {
    Cholesky::new(kernel_matrix(times, hp)).ok_or(Error::NotPositiveDefinite {
        jitter: hp.absolute_jitter(),
    })
}

/// Log marginal likelihood of the mean-removed window speeds and its
/// gradient with respect to `(ln σ_f², ln ℓ)`.
pub fn log_marginal_likelihood(window: &SpeedWindow, hp: &GpHyperParams) -> Result<(f64, [f64; 2])> {
    hp.validate()?;
    let r = window.residuals(window.mean());
    lml_with_residuals(&window.times, &r, hp)
}

fn lml_with_residuals(
    times: &[f64; WINDOW_LEN],
    r: &Vec5,
    hp: &GpHyperParams,
) -> Result<(f64, [f64; 2])> {
    let chol = factor(times, hp)?;
    let alpha = chol.solve(r);
    let inv = chol.inverse();
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = WINDOW_LEN as f64;
    let fit = r.dot(&alpha);
    let value = -0.5 * fit - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();

    // dK/d ln σ_f² is the full jittered matrix, so the trace collapses.
    let d_var = 0.5 * (fit - n);

    let ell2 = hp.length_scale * hp.length_scale;
    let mut d_scale = 0.0;
    for i in 0..WINDOW_LEN {
        for j in 0..WINDOW_LEN {
            let dt = times[i] - times[j];
            let dk = rbf_kernel(times[i], times[j], hp) * dt * dt / ell2;
            d_scale += (alpha[i] * alpha[j] - inv[(i, j)]) * dk;
        }
    }
    Ok((value, [d_var, 0.5 * d_scale]))
}

/// Fitted GP over one speed window.
#[derive(Debug, Clone)]
pub struct GpModel {
    window: SpeedWindow,
    mean_offset: f64,
    hyper: GpHyperParams,
    chol: Cholesky<f64, Const<WINDOW_LEN>>,
    alpha: Vec5,
}

impl GpModel {
    /// Condition a GP with fixed hyperparameters on `window`, using the
    /// window mean as offset.
    pub fn new(window: SpeedWindow, hyper: GpHyperParams) -> Result<Self> {
        let offset = window.mean();
        Self::with_offset(window, hyper, offset)
    }

    pub fn with_offset(window: SpeedWindow, hyper: GpHyperParams, mean_offset: f64) -> Result<Self> {
        hyper.validate()?;
        let chol = factor(&window.times, &hyper)?;
        let alpha = chol.solve(&window.residuals(mean_offset));
        Ok(Self {
            window,
            mean_offset,
            hyper,
            chol,
            alpha,
        })
    }

    pub fn window(&self) -> &SpeedWindow {
        &self.window
    }

    pub fn hyper(&self) -> &GpHyperParams {
        &self.hyper
    }

    pub fn mean_offset(&self) -> f64 {
        self.mean_offset
    }

    /// Jittered training covariance rebuilt from the cached factor.
    pub fn factored_covariance(&self) -> Mat5 {
        let l = self.chol.l();
        l * l.transpose()
    }

    fn cross(&self, t: f64) -> Vec5 {
        Vec5::from_fn(|i, _| rbf_kernel(t, self.window.times[i], &self.hyper))
    }

    /// Posterior mean and variance at a single time (unclamped).
    pub fn predict(&self, t: f64) -> (f64, f64) {
        let k = self.cross(t);
        let mean = k.dot(&self.alpha) + self.mean_offset;
        let v = self.chol.solve(&k);
        let var = self.hyper.signal_variance - k.dot(&v);
        (mean, var)
    }

    /// Full posterior covariance at the given times.
    pub fn posterior_covariance(&self, times: &[f64]) -> DMatrix<f64> {
        let n = times.len();
        let cross: Vec<Vec5> = times.iter().map(|&t| self.cross(t)).collect();
        let solved: Vec<Vec5> = cross.iter().map(|k| self.chol.solve(k)).collect();
        DMatrix::from_fn(n, n, |i, j| {
            rbf_kernel(times[i], times[j], &self.hyper) - cross[i].dot(&solved[j])
        })
    }

    /// Forecast `n` samples spaced `ts` apart starting at time `from`.
    /// Means are clamped to `[0, v_max]`; round-off negative variances to 0.
    pub fn forecast(&self, from: f64, n: usize, ts: f64, v_max: f64) -> SpeedForecast {
        let mut out = SpeedForecast {
            times: Vec::with_capacity(n),
            mean: Vec::with_capacity(n),
            std: Vec::with_capacity(n),
        };
        for k in 0..n {
            let t = from + ts * k as f64;
            let (m, var) = self.predict(t);
            out.times.push(t);
            out.mean.push(m.clamp(0.0, v_max));
            out.std.push(var.max(0.0).sqrt());
        }
        out
    }

    pub fn payload(&self) -> GpPayload {
        GpPayload {
            times: self.window.times,
            speeds: self.window.speeds,
            signal_variance: self.hyper.signal_variance,
            length_scale: self.hyper.length_scale,
            mean_offset: self.mean_offset,
        }
    }

    pub fn from_payload(payload: &GpPayload) -> Result<Self> {
        let window = SpeedWindow::new(payload.times, payload.speeds)?;
        let hyper = GpHyperParams::new(payload.signal_variance, payload.length_scale);
        Self::with_offset(window, hyper, payload.mean_offset)
    }
}

fn project(theta: [f64; 2], scale_min: f64) -> [f64; 2] {
    [
        theta[0].clamp(LN_VAR_MIN, LN_VAR_MAX),
        theta[1].clamp(scale_min, LN_SCALE_MAX),
    ]
}

/// Projected gradient ascent with Armijo backtracking from one start.
fn ascend(times: &[f64; WINDOW_LEN], r: &Vec5, start: [f64; 2], scale_min: f64, jitter: f64) -> Option<([f64; 2], f64)> {
    let eval = |theta: [f64; 2]| lml_with_residuals(times, r, &GpHyperParams::from_log(theta, jitter)).ok();
    let mut theta = project(start, scale_min);
    let (mut value, mut grad) = eval(theta)?;
    let mut step = 1.0;
    for _ in 0..MAX_ASCENT_ITERS {
        // Zero components pushing against an active bound.
        let lower = [LN_VAR_MIN, scale_min];
        let upper = [LN_VAR_MAX, LN_SCALE_MAX];
        for i in 0..2 {
            if (theta[i] <= lower[i] && grad[i] < 0.0) || (theta[i] >= upper[i] && grad[i] > 0.0) {
                grad[i] = 0.0;
            }
        }
        let gnorm = grad[0].abs().max(grad[1].abs());
        if gnorm < 1e-7 {
            break;
        }
        let mut accepted = None;
        for _ in 0..50 {
            let cand = project([theta[0] + step * grad[0], theta[1] + step * grad[1]], scale_min);
            let moved = [cand[0] - theta[0], cand[1] - theta[1]];
            let predicted = grad[0] * moved[0] + grad[1] * moved[1];
            if predicted <= 0.0 {
                step *= 0.5;
                continue;
            }
            if let Some((v, g)) = eval(cand) {
                if v >= value + 1e-4 * predicted {
                    accepted = Some((cand, v, g));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, v, g)) = accepted else { break };
        let gain = v - value;
        theta = cand;
        value = v;
        grad = g;
        step = (step * 2.0).min(1e3);
        if gain < 1e-12 * (1.0 + value.abs()) {
            break;
        }
    }
    Some((theta, value))
}

/// Fit hyperparameters by maximum marginal likelihood.
///
/// Starts form a 3×3 grid: `ln σ_f ∈ ln std + {-1, 0, 1}` and
/// `ln ℓ ∈ ln span + {-1, 0, 1}`. The best ascent result wins; ties keep the
/// earliest start.
pub fn fit(window: &SpeedWindow) -> Result<GpModel> {
    fit_with_jitter(window, DEFAULT_JITTER)
}

pub fn fit_with_jitter(window: &SpeedWindow, jitter: f64) -> Result<GpModel> {
    let window = SpeedWindow::new(window.times, window.speeds)?;
    let offset = window.mean();
    let r = window.residuals(offset);
    let std = (r.norm_squared() / WINDOW_LEN as f64).sqrt().max(1e-3);
    let span = window.span();
    let scale_min = (0.25 * window.spacing()).ln();

    let mut best: Option<([f64; 2], f64)> = None;
    for ds in [-1.0, 0.0, 1.0] {
        for dl in [-1.0, 0.0, 1.0] {
            let start = [2.0 * (std.ln() + ds), span.ln() + dl];
            if let Some((theta, value)) = ascend(&window.times, &r, start, scale_min, jitter) {
                if best.is_none_or(|(_, b)| value > b) {
                    best = Some((theta, value));
                }
            }
        }
    }
    let (theta, _) = best.ok_or(Error::NotPositiveDefinite { jitter })?;
    GpModel::with_offset(window, GpHyperParams::from_log(theta, jitter), offset)
}

/// Per-step Gaussian forecast of the predecessor speed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeedForecast {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SpeedForecast {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Discrete approximation of a zero-mean scalar disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceLevels {
    pub levels: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DisturbanceLevels {
    /// Single zero level with probability one (exactly known profile).
    pub fn deterministic() -> Self {
        Self {
            levels: vec![0.0],
            probs: vec![1.0],
        }
    }

    pub fn count(&self) -> usize {
        self.levels.len()
    }

    pub fn mean(&self) -> f64 {
        self.levels.iter().zip(&self.probs).map(|(n, p)| n * p).sum()
    }

    pub fn variance(&self) -> f64 {
        self.levels.iter().zip(&self.probs).map(|(n, p)| p * n * n).sum()
    }
}

/// Three-point Gauss–Hermite rule for `N(0, std²)`.
pub fn discretize(std: f64) -> DisturbanceLevels {
    let std = std.max(0.0);
    let node = 3f64.sqrt() * std;
    DisturbanceLevels {
        levels: vec![-node, 0.0, node],
        probs: vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    }
}

/// Forward-difference acceleration of the forecast mean, clipped to the
/// acceleration bounds. The last entry repeats its neighbour.
pub fn implied_accel(forecast: &SpeedForecast, ts: f64, accel_min: f64, accel_max: f64) -> Vec<f64> {
    let n = forecast.mean.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut acc: Vec<f64> = forecast
        .mean
        .windows(2)
        .map(|w| ((w[1] - w[0]) / ts).clamp(accel_min, accel_max))
        .collect();
    acc.push(acc[n - 2]);
    acc
}

/// Broadcast form of a GP model: 5 times, 5 speeds, σ_f², ℓ, mean offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPayload {
    pub times: [f64; WINDOW_LEN],
    pub speeds: [f64; WINDOW_LEN],
    pub signal_variance: f64,
    pub length_scale: f64,
    pub mean_offset: f64,
}

impl GpPayload {
    pub const VALUES: usize = 2 * WINDOW_LEN + 3;
    pub const BYTES: usize = 8 * Self::VALUES;

    pub fn to_array(&self) -> [f64; Self::VALUES] {
        let mut out = [0.0; Self::VALUES];
        out[..WINDOW_LEN].copy_from_slice(&self.times);
        out[WINDOW_LEN..2 * WINDOW_LEN].copy_from_slice(&self.speeds);
        out[10] = self.signal_variance;
        out[11] = self.length_scale;
        out[12] = self.mean_offset;
        out
    }

    pub fn from_array(values: &[f64; Self::VALUES]) -> Self {
        let mut times = [0.0; WINDOW_LEN];
        let mut speeds = [0.0; WINDOW_LEN];
        times.copy_from_slice(&values[..WINDOW_LEN]);
        speeds.copy_from_slice(&values[WINDOW_LEN..2 * WINDOW_LEN]);
        Self {
            times,
            speeds,
            signal_variance: values[10],
            length_scale: values[11],
            mean_offset: values[12],
        }
    }

    /// Little-endian binary64 encoding, 104 bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.to_array().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::BYTES {
            return Err(Error::Wire(format!(
                "gp payload needs {} bytes, got {}",
                Self::BYTES,
                bytes.len()
            )));
        }
        let mut values = [0.0; Self::VALUES];
        for (v, chunk) in values.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(Self::from_array(&values))
    }
}
