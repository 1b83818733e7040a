//! The temporal evolution semantic space: four numerically verifiable
//! primitive statistics computed from an (observation, forecast) window pair,
//! adaptive thresholds fitted from training-set quantiles, and the
//! deterministic discretization into categorical labels.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TessError};
use crate::series::{first_difference, mean, pop_std, Window};

/// The four primitive families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrimitiveKind {
    MeanShift,
    Volatility,
    Shape,
    Lag,
}

pub const ALL_KINDS: [PrimitiveKind; 4] = [
    PrimitiveKind::MeanShift,
    PrimitiveKind::Volatility,
    PrimitiveKind::Shape,
    PrimitiveKind::Lag,
];

const MEAN_SHIFT_LABELS: [&str; 5] = ["strong-rise", "mild-rise", "stable", "mild-drop", "strong-drop"];
const VOLATILITY_LABELS: [&str; 5] = ["surge", "rise", "stable", "fall", "calm"];
const SHAPE_LABELS: [&str; 5] = ["ascend", "descend", "peak", "trough", "oscillate"];
const LAG_LABELS: [&str; 6] = [
    "early-fade",
    "early-persist",
    "mid-fade",
    "mid-persist",
    "late",
    "diffuse",
];

impl PrimitiveKind {
    /// Candidate names in canonical (prompt) order.
    pub fn candidates(self) -> &'static [&'static str] {
        match self {
            PrimitiveKind::MeanShift => &MEAN_SHIFT_LABELS,
            PrimitiveKind::Volatility => &VOLATILITY_LABELS,
            PrimitiveKind::Shape => &SHAPE_LABELS,
            PrimitiveKind::Lag => &LAG_LABELS,
        }
    }

    pub fn cardinality(self) -> usize {
        self.candidates().len()
    }

    /// Output-line key used in the prompt and structured responses.
    pub fn line_key(self) -> &'static str {
        match self {
            PrimitiveKind::MeanShift => "Mean Shift",
            PrimitiveKind::Volatility => "Volatility",
            PrimitiveKind::Shape => "Shape",
            PrimitiveKind::Lag => "Lag",
        }
    }
}

/// One categorical value of one primitive, stored as its canonical index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrimitiveLabel {
    kind: PrimitiveKind,
    index: usize,
}

impl PrimitiveLabel {
    pub fn new(kind: PrimitiveKind, index: usize) -> Result<Self> {
        if index >= kind.cardinality() {
            return Err(TessError::InvalidArgument(format!(
                "label index {index} out of range for {kind:?}"
            )));
        }
        Ok(Self { kind, index })
    }

    /// Case-insensitive lookup against the kind's candidate table.
    pub fn from_name(kind: PrimitiveKind, name: &str) -> Option<Self> {
        let needle = name.trim().to_ascii_lowercase();
        kind.candidates()
            .iter()
            .position(|c| *c == needle)
            .map(|index| Self { kind, index })
    }

    pub fn kind(&self) -> PrimitiveKind {
        self.kind
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn name(&self) -> &'static str {
        self.kind.candidates()[self.index]
    }
}

impl serde::Serialize for PrimitiveLabel {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(self.name())
    }
}

/// Quantile levels and fixed defaults used when fitting a [`ThresholdSet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub mean_q1: f64,
    pub mean_q2: f64,
    pub vol_q1: f64,
    pub vol_q2: f64,
    /// `tau_shape = shape_scale * median of sigma(X)` over training windows.
    pub shape_scale: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub rho: f64,
    /// Prominence threshold as a multiple of `1 / n_fcst`.
    pub eta_scale: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub n_fcst: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            mean_q1: 0.60,
            mean_q2: 0.85,
            vol_q1: 0.60,
            vol_q2: 0.85,
            shape_scale: 0.25,
            kappa1: 1.0 / 3.0,
            kappa2: 2.0 / 3.0,
            rho: 0.4,
            eta_scale: 1.5,
            alpha: 0.5,
            epsilon: 1e-8,
            n_fcst: 4,
        }
    }
}

/// Fitted discretization thresholds. Immutable after fitting; serializes to a
/// flat JSON object for run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub tau1_mean: f64,
    pub tau2_mean: f64,
    pub tau1_vol: f64,
    pub tau2_vol: f64,
    pub tau_shape: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub rho: f64,
    pub eta: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub n_fcst: usize,
}

impl ThresholdSet {
    pub fn validate(&self) -> Result<()> {
        let ordered = |t1: f64, t2: f64, what: &str| {
            if !(t1 > 0.0 && t2 > t1) {
                return Err(TessError::ThresholdFit(format!(
                    "{what} thresholds must satisfy 0 < tau1 < tau2, got ({t1}, {t2})"
                )));
            }
            Ok(())
        };
        ordered(self.tau1_mean, self.tau2_mean, "mean-shift")?;
        ordered(self.tau1_vol, self.tau2_vol, "volatility")?;
        if self.tau_shape <= 0.0 {
            return Err(TessError::ThresholdFit(format!(
                "tau_shape must be > 0, got {}",
                self.tau_shape
            )));
        }
        if !(self.kappa1 > 0.0 && self.kappa2 > self.kappa1 && self.kappa2 < 1.0) {
            return Err(TessError::ThresholdFit(format!(
                "need 0 < kappa1 < kappa2 < 1, got ({}, {})",
                self.kappa1, self.kappa2
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(TessError::ThresholdFit(format!("rho out of (0,1): {}", self.rho)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(TessError::ThresholdFit(format!("eta out of (0,1): {}", self.eta)));
        }
        if self.alpha < 0.0 || self.epsilon <= 0.0 || self.n_fcst < 2 {
            return Err(TessError::ThresholdFit(
                "need alpha >= 0, epsilon > 0, n_fcst >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Check that the forecast horizon is compatible with the patch count.
    pub fn check_horizon(&self, horizon: usize) -> Result<()> {
        if horizon % self.n_fcst != 0 {
            return Err(TessError::InvalidArgument(format!(
                "n_fcst = {} must divide horizon {horizon}",
                self.n_fcst
            )));
        }
        Ok(())
    }
}

/// Ground-truth labels for one window pair, in fixed kind order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PrimitiveVector {
    pub mean: PrimitiveLabel,
    pub vol: PrimitiveLabel,
    pub shape: PrimitiveLabel,
    pub lag: PrimitiveLabel,
}

impl PrimitiveVector {
    pub fn get(&self, kind: PrimitiveKind) -> PrimitiveLabel {
        match kind {
            PrimitiveKind::MeanShift => self.mean,
            PrimitiveKind::Volatility => self.vol,
            PrimitiveKind::Shape => self.shape,
            PrimitiveKind::Lag => self.lag,
        }
    }

    pub fn labels(&self) -> [PrimitiveLabel; 4] {
        [self.mean, self.vol, self.shape, self.lag]
    }
}

/// Normalized per-patch influence weights plus derived timing indicators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagProfile {
    pub pi: Vec<f64>,
    pub centroid_c: f64,
    pub tail_d: f64,
    pub peak_q: f64,
    pub argmax: usize,
}

/// Linear-interpolation quantile of an unsorted sample.
fn quantile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty() && (0.0..=1.0).contains(&p));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Fit adaptive thresholds from training windows with forecast segments.
pub fn fit_thresholds(train_windows: &[Window], cfg: &ThresholdConfig) -> Result<ThresholdSet> {
    let paired: Vec<&Window> = train_windows.iter().filter(|w| w.y_fut.is_some()).collect();
    if paired.len() < 50 {
        return Err(TessError::ThresholdFit(format!(
            "need >= 50 windows with forecast segments, got {}",
            paired.len()
        )));
    }
    let mut abs_dmu = Vec::with_capacity(paired.len());
    let mut abs_rsig = Vec::with_capacity(paired.len());
    let mut obs_std = Vec::with_capacity(paired.len());
    for w in &paired {
        let y = w.future()?;
        abs_dmu.push(mean_shift_stat(&w.x_obs, y, cfg.epsilon).abs());
        abs_rsig.push(volatility_stat(&w.x_obs, y, cfg.epsilon)?.abs());
        obs_std.push(pop_std(&w.x_obs));
    }
    let tau1_mean = quantile(&abs_dmu, cfg.mean_q1);
    let tau2_mean = quantile(&abs_dmu, cfg.mean_q2);
    let tau1_vol = quantile(&abs_rsig, cfg.vol_q1);
    let tau2_vol = quantile(&abs_rsig, cfg.vol_q2);
    if tau1_mean >= tau2_mean {
        return Err(TessError::ThresholdFit(format!(
            "degenerate |mean-shift| distribution: q{:.2} = {tau1_mean}, q{:.2} = {tau2_mean}",
            cfg.mean_q1, cfg.mean_q2
        )));
    }
    if tau1_vol >= tau2_vol {
        return Err(TessError::ThresholdFit(format!(
            "degenerate |volatility| distribution: q{:.2} = {tau1_vol}, q{:.2} = {tau2_vol}",
            cfg.vol_q1, cfg.vol_q2
        )));
    }
    let set = ThresholdSet {
        tau1_mean,
        tau2_mean,
        tau1_vol,
        tau2_vol,
        tau_shape: cfg.shape_scale * median(&obs_std),
        kappa1: cfg.kappa1,
        kappa2: cfg.kappa2,
        rho: cfg.rho,
        eta: cfg.eta_scale / cfg.n_fcst as f64,
        alpha: cfg.alpha,
        epsilon: cfg.epsilon,
        n_fcst: cfg.n_fcst,
    };
    set.validate()?;
    Ok(set)
}

/// Standardized mean difference between forecast and observation windows.
pub fn mean_shift_stat(x: &[f64], y: &[f64], epsilon: f64) -> f64 {
    (mean(y) - mean(x)) / pop_std(x).max(epsilon)
}

/// Log-ratio of first-difference standard deviations.
pub fn volatility_stat(x: &[f64], y: &[f64], epsilon: f64) -> Result<f64> {
    let dx = first_difference(x)?;
    let dy = first_difference(y)?;
    Ok(((pop_std(&dy) + epsilon) / (pop_std(&dx) + epsilon)).ln())
}

/// Five-band discretization shared by the mean-shift and volatility
/// primitives: outer bands own strict inequalities, inner bands own the
/// boundaries.
fn five_band(stat: f64, tau1: f64, tau2: f64, labels: [&'static str; 5], kind: PrimitiveKind) -> PrimitiveLabel {
    let idx = if stat > tau2 {
        0
    } else if stat > tau1 {
        1
    } else if stat >= -tau1 {
        2
    } else if stat >= -tau2 {
        3
    } else {
        4
    };
    debug_assert_eq!(kind.candidates(), &labels);
    PrimitiveLabel { kind, index: idx }
}

pub fn classify_mean_shift(dmu: f64, tau1: f64, tau2: f64) -> PrimitiveLabel {
    five_band(dmu, tau1, tau2, MEAN_SHIFT_LABELS, PrimitiveKind::MeanShift)
}

pub fn classify_volatility(r_sigma: f64, tau1: f64, tau2: f64) -> PrimitiveLabel {
    five_band(r_sigma, tau1, tau2, VOLATILITY_LABELS, PrimitiveKind::Volatility)
}

/// Split `y` into `n_fcst` contiguous equal patches.
fn equal_patches(y: &[f64], n_fcst: usize) -> Result<Vec<&[f64]>> {
    if n_fcst < 2 {
        return Err(TessError::InvalidArgument("n_fcst must be >= 2".into()));
    }
    if y.len() % n_fcst != 0 {
        return Err(TessError::InvalidArgument(format!(
            "n_fcst = {n_fcst} does not divide horizon {}",
            y.len()
        )));
    }
    let patch_len = y.len() / n_fcst;
    Ok(y.chunks_exact(patch_len).collect())
}

/// Thresholded signs of consecutive forecast-patch mean differences.
pub fn shape_signs(y: &[f64], n_fcst: usize, tau_shape: f64) -> Result<Vec<i8>> {
    let patches = equal_patches(y, n_fcst)?;
    let means: Vec<f64> = patches.iter().map(|p| mean(p)).collect();
    Ok(means
        .windows(2)
        .map(|pair| {
            let diff = pair[1] - pair[0];
            if diff > tau_shape {
                1
            } else if diff < -tau_shape {
                -1
            } else {
                0
            }
        })
        .collect())
}

/// Shape category from a sign sequence. The nonzero subsequence decides:
/// all +1 -> ascend, all -1 -> descend, one +to- change -> peak, one -to+
/// change -> trough, anything else (including all zeros) -> oscillate.
pub fn classify_shape(signs: &[i8]) -> PrimitiveLabel {
    let nonzero: Vec<i8> = signs.iter().copied().filter(|s| *s != 0).collect();
    let index = if nonzero.is_empty() {
        4
    } else if nonzero.iter().all(|s| *s == 1) {
        0
    } else if nonzero.iter().all(|s| *s == -1) {
        1
    } else {
        let changes = nonzero.windows(2).filter(|p| p[0] != p[1]).count();
        if changes == 1 {
            if nonzero[0] == 1 {
                2
            } else {
                3
            }
        } else {
            4
        }
    };
    PrimitiveLabel {
        kind: PrimitiveKind::Shape,
        index,
    }
}

/// Per-patch influence weights over the forecast horizon and the derived
/// centroid, post-peak tail mass and peak prominence.
pub fn lag_profile(x: &[f64], y: &[f64], n_fcst: usize, alpha: f64, epsilon: f64) -> Result<LagProfile> {
    let patches = equal_patches(y, n_fcst)?;
    if patches[0].len() < 2 {
        return Err(TessError::InvalidArgument(format!(
            "lag profile needs patch length >= 2, got {}",
            patches[0].len()
        )));
    }
    let x_mean = mean(x);
    let x_std = pop_std(x).max(epsilon);
    let dx_std = pop_std(&first_difference(x)?);
    let intensities: Vec<f64> = patches
        .iter()
        .map(|p| {
            let level = ((mean(p) - x_mean) / x_std).abs();
            let du_std = pop_std(&first_difference(p)?);
            let vol = ((du_std + epsilon) / (dx_std + epsilon)).ln().abs();
            Ok(level + alpha * vol)
        })
        .collect::<Result<_>>()?;
    let total: f64 = intensities.iter().sum();
    let pi: Vec<f64> = if total < epsilon {
        vec![1.0 / n_fcst as f64; n_fcst]
    } else {
        intensities.iter().map(|a| a / total).collect()
    };
    let centroid_c = pi
        .iter()
        .enumerate()
        .map(|(i, p)| p * i as f64 / (n_fcst - 1) as f64)
        .sum();
    let mut argmax = 0;
    for (i, p) in pi.iter().enumerate() {
        if *p > pi[argmax] {
            argmax = i;
        }
    }
    let tail_d = pi[argmax + 1..].iter().sum();
    let peak_q = pi[argmax];
    Ok(LagProfile {
        pi,
        centroid_c,
        tail_d,
        peak_q,
        argmax,
    })
}

pub fn classify_lag(profile: &LagProfile, kappa1: f64, kappa2: f64, rho: f64, eta: f64) -> PrimitiveLabel {
    let index = if profile.peak_q <= eta {
        5
    } else if profile.centroid_c > kappa2 {
        4
    } else if profile.centroid_c <= kappa1 {
        if profile.tail_d <= rho {
            0
        } else {
            1
        }
    } else if profile.tail_d <= rho {
        2
    } else {
        3
    };
    PrimitiveLabel {
        kind: PrimitiveKind::Lag,
        index,
    }
}

/// The ground-truth primitive map: all four statistic+classify pipelines.
pub fn extract_all(x: &[f64], y: &[f64], thr: &ThresholdSet) -> Result<PrimitiveVector> {
    let dmu = mean_shift_stat(x, y, thr.epsilon);
    let r_sigma = volatility_stat(x, y, thr.epsilon)?;
    let signs = shape_signs(y, thr.n_fcst, thr.tau_shape)?;
    let profile = lag_profile(x, y, thr.n_fcst, thr.alpha, thr.epsilon)?;
    Ok(PrimitiveVector {
        mean: classify_mean_shift(dmu, thr.tau1_mean, thr.tau2_mean),
        vol: classify_volatility(r_sigma, thr.tau1_vol, thr.tau2_vol),
        shape: classify_shape(&signs),
        lag: classify_lag(&profile, thr.kappa1, thr.kappa2, thr.rho, thr.eta),
    })
}

/// Raw statistics snapshot carried alongside benchmark samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveStats {
    pub delta_mu: f64,
    pub r_sigma: f64,
    pub centroid_c: f64,
    pub tail_d: f64,
    pub peak_q: f64,
}

impl PrimitiveStats {
    pub fn compute(x: &[f64], y: &[f64], thr: &ThresholdSet) -> Result<Self> {
        let profile = lag_profile(x, y, thr.n_fcst, thr.alpha, thr.epsilon)?;
        Ok(Self {
            delta_mu: mean_shift_stat(x, y, thr.epsilon),
            r_sigma: volatility_stat(x, y, thr.epsilon)?,
            centroid_c: profile.centroid_c,
            tail_d: profile.tail_d,
            peak_q: profile.peak_q,
        })
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.delta_mu, self.r_sigma, self.centroid_c, self.tail_d, self.peak_q]
    }
}

#[cfg(test)]
pub fn test_threshold_set() -> ThresholdSet {
    ThresholdSet {
        tau1_mean: 0.5,
        tau2_mean: 1.5,
        tau1_vol: 0.2,
        tau2_vol: 0.6,
        tau_shape: 0.1,
        kappa1: 1.0 / 3.0,
        kappa2: 2.0 / 3.0,
        rho: 0.4,
        eta: 1.5 / 4.0,
        alpha: 0.5,
        epsilon: 1e-8,
        n_fcst: 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_shift_hand_value() {
        let dmu = mean_shift_stat(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 1e-8);
        assert!((dmu - 3.5777087639996634).abs() < 1e-12);
    }

    #[test]
    fn mean_shift_zero_when_identical() {
        let x = [2.0, 4.0, 6.0];
        assert_eq!(mean_shift_stat(&x, &x, 1e-8), 0.0);
    }

    #[test]
    fn mean_shift_shift_invariant() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 1.0, 5.0, 3.0];
        let xs: Vec<f64> = x.iter().map(|v| v + 17.25).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + 17.25).collect();
        let a = mean_shift_stat(&x, &y, 1e-8);
        let b = mean_shift_stat(&xs, &ys, 1e-8);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn mean_shift_scale_invariant() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 1.0, 5.0, 3.0];
        let xs: Vec<f64> = x.iter().map(|v| v * 3.5).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * 3.5).collect();
        assert!((mean_shift_stat(&x, &y, 1e-8) - mean_shift_stat(&xs, &ys, 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn volatility_hand_value() {
        let r = volatility_stat(&[0.0, 1.0, 0.0, 1.0, 0.0], &[0.0, 2.0, 0.0, 2.0, 0.0], 1e-8).unwrap();
        assert!((r - 2.0f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn volatility_zero_for_permuted_diffs() {
        // y's increments are a permutation of x's increments
        let x = [0.0, 1.0, 3.0, 4.0];
        let y = [0.0, 2.0, 3.0, 4.0];
        assert_eq!(first_difference(&x).unwrap(), vec![1.0, 2.0, 1.0]);
        assert_eq!(first_difference(&y).unwrap(), vec![2.0, 1.0, 1.0]);
        let r = volatility_stat(&x, &y, 1e-8).unwrap();
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn volatility_log_law_under_e_scaling() {
        let x = [0.0, 1.0, -1.0, 2.0, 0.5];
        let e = std::f64::consts::E;
        let mut y = vec![0.0];
        for d in first_difference(&x).unwrap() {
            y.push(y.last().unwrap() + e * d);
        }
        let r0 = volatility_stat(&x, &x, 1e-12).unwrap();
        let r1 = volatility_stat(&x, &y, 1e-12).unwrap();
        assert!((r1 - r0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn five_band_boundaries() {
        let t1 = 1.0;
        let t2 = 2.0;
        assert_eq!(classify_mean_shift(2.5, t1, t2).name(), "strong-rise");
        assert_eq!(classify_mean_shift(2.0, t1, t2).name(), "mild-rise");
        assert_eq!(classify_mean_shift(1.0, t1, t2).name(), "stable");
        assert_eq!(classify_mean_shift(0.0, t1, t2).name(), "stable");
        assert_eq!(classify_mean_shift(-1.0, t1, t2).name(), "stable");
        assert_eq!(classify_mean_shift(-1.5, t1, t2).name(), "mild-drop");
        assert_eq!(classify_mean_shift(-2.0, t1, t2).name(), "mild-drop");
        assert_eq!(classify_mean_shift(-2.1, t1, t2).name(), "strong-drop");
        assert_eq!(classify_volatility(3.0, t1, t2).name(), "surge");
        assert_eq!(classify_volatility(0.0, t1, t2).name(), "stable");
        assert_eq!(classify_volatility(-(t2 + 1.0), t1, t2).name(), "calm");
    }

    #[test]
    fn shape_signs_hand_values() {
        // patch means 1,2,3,4
        let y = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(shape_signs(&y, 4, 0.1).unwrap(), vec![1, 1, 1]);
        // equal patch means
        let flat = [5.0; 8];
        assert_eq!(shape_signs(&flat, 4, 0.1).unwrap(), vec![0, 0, 0]);
        // means 1,3,2 with tau 0.5
        let y2 = [1.0, 1.0, 3.0, 3.0, 2.0, 2.0];
        assert_eq!(shape_signs(&y2, 3, 0.5).unwrap(), vec![1, -1]);
        assert!(shape_signs(&y2, 4, 0.5).is_err());
    }

    #[test]
    fn shape_classification_rules() {
        assert_eq!(classify_shape(&[1, 1, 1]).name(), "ascend");
        assert_eq!(classify_shape(&[1, 0, 1]).name(), "ascend");
        assert_eq!(classify_shape(&[-1, 0, -1]).name(), "descend");
        assert_eq!(classify_shape(&[1, 0, -1]).name(), "peak");
        assert_eq!(classify_shape(&[-1, 1, 0]).name(), "trough");
        assert_eq!(classify_shape(&[1, -1, 1]).name(), "oscillate");
        assert_eq!(classify_shape(&[0, 0, 0]).name(), "oscillate");
    }

    #[test]
    fn lag_profile_hand_case() {
        // Construct Y so patch intensities are dominated by level offsets:
        // X has mean 0, sigma 1, diff pattern sigma shared by all patches.
        // a = [3, 1, 0, 0] is forced directly through the level term with
        // alpha = 0 so the volatility term drops out.
        let x = [1.0, -1.0, 1.0, -1.0];
        let y = [3.0, 3.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let p = lag_profile(&x, &y, 4, 0.0, 1e-8).unwrap();
        assert!((p.pi[0] - 0.75).abs() < 1e-12);
        assert!((p.pi[1] - 0.25).abs() < 1e-12);
        assert!(p.pi[2].abs() < 1e-12 && p.pi[3].abs() < 1e-12);
        assert!((p.centroid_c - 1.0 / 12.0).abs() < 1e-12);
        assert_eq!(p.argmax, 0);
        assert!((p.tail_d - 0.25).abs() < 1e-12);
        assert!((p.peak_q - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lag_profile_degenerate_uniform() {
        // All patches are identical, so every intensity is equal and the
        // normalized profile is uniform.
        let x = [0.0, 1.0, 0.0, 1.0];
        let y = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let p = lag_profile(&x, &y, 4, 0.5, 1e-8).unwrap();
        for pi in &p.pi {
            assert!((pi - 0.25).abs() < 1e-9);
        }
        assert!((p.peak_q - 0.25).abs() < 1e-9);
    }

    #[test]
    fn lag_profile_requires_patch_len_2() {
        let x = [0.0, 1.0, 0.0, 1.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        assert!(lag_profile(&x, &y, 4, 0.5, 1e-8).is_err());
    }

    #[test]
    fn lag_classification_rules() {
        let mk = |pi: Vec<f64>| {
            let mut argmax = 0;
            for (i, p) in pi.iter().enumerate() {
                if *p > pi[argmax] {
                    argmax = i;
                }
            }
            let tail_d = pi[argmax + 1..].iter().sum();
            let peak_q = pi[argmax];
            let centroid_c = pi
                .iter()
                .enumerate()
                .map(|(i, p)| p * i as f64 / (pi.len() - 1) as f64)
                .sum();
            LagProfile { pi, centroid_c, tail_d, peak_q, argmax }
        };
        let (k1, k2, rho, eta) = (1.0 / 3.0, 2.0 / 3.0, 0.4, 1.5 / 4.0);
        // uniform -> q = 1/4 <= eta -> diffuse
        assert_eq!(classify_lag(&mk(vec![0.25; 4]), k1, k2, rho, eta).name(), "diffuse");
        // early concentrated, little tail
        assert_eq!(classify_lag(&mk(vec![0.8, 0.1, 0.05, 0.05]), k1, k2, rho, eta).name(), "early-fade");
        // early peak with heavy tail: c = 0.3/3 + 0.1*2/3 + 0.1 = 4/15
        assert_eq!(classify_lag(&mk(vec![0.5, 0.3, 0.1, 0.1]), k1, k2, rho, eta).name(), "early-persist");
        // all mass on last patch -> c = 1, late
        let last = mk(vec![0.0, 0.0, 0.0, 1.0]);
        assert!((last.centroid_c - 1.0).abs() < 1e-12);
        assert!((last.tail_d - 0.0).abs() < 1e-12);
        assert_eq!(classify_lag(&last, k1, k2, rho, eta).name(), "late");
        // mid-horizon pulse
        assert_eq!(classify_lag(&mk(vec![0.1, 0.7, 0.1, 0.1]), k1, k2, rho, eta).name(), "mid-fade");
        assert_eq!(classify_lag(&mk(vec![0.0, 0.5, 0.2, 0.3]), k1, k2, rho, eta).name(), "mid-persist");
    }

    #[test]
    fn extract_all_no_change_window() {
        let x = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let y = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let thr = test_threshold_set();
        let v = extract_all(&x, &y, &thr).unwrap();
        assert_eq!(v.mean.name(), "stable");
        assert_eq!(v.vol.name(), "stable");
        assert_eq!(v.shape.name(), "oscillate");
        assert_eq!(v.lag.name(), "diffuse");
    }

    #[test]
    fn extract_all_strong_ramp() {
        let x: Vec<f64> = (0..8).map(|i| (i % 2) as f64 * 0.1).collect();
        // steep ramp with growing jitter
        let y: Vec<f64> = (0..8)
            .map(|i| 10.0 * i as f64 + if i % 2 == 0 { 0.0 } else { 2.0 })
            .collect();
        let thr = test_threshold_set();
        let v = extract_all(&x, &y, &thr).unwrap();
        assert_eq!(v.mean.name(), "strong-rise");
        assert_eq!(v.vol.name(), "surge");
        assert_eq!(v.shape.name(), "ascend");
    }

    #[test]
    fn extract_all_deterministic() {
        let x = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let y = [5.0, 3.0, 5.0, 8.0, 9.0, 7.0, 9.0, 3.0];
        let thr = test_threshold_set();
        let a = extract_all(&x, &y, &thr).unwrap();
        let b = extract_all(&x, &y, &thr).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_thresholds_known_quantiles() {
        // |dmu| spread over {1..100}: X = [0,2,0,2] has mean 1 and sigma 1, so
        // Y centered at k+1 gives dmu = k. The alternating amplitude a_k keeps
        // Y's mean fixed while spreading the |r_sigma| sample so the
        // volatility quantiles are non-degenerate.
        let mut windows = Vec::new();
        for k in 1..=100 {
            let kf = k as f64;
            let a = 1.0 + kf / 100.0;
            let c = kf + 1.0;
            let w = Window::new(
                vec![0.0, 2.0, 0.0, 2.0],
                Some(vec![c + a, c - a, c + a, c - a]),
                0,
            )
            .unwrap();
            windows.push(w);
        }
        let cfg = ThresholdConfig::default();
        let set = fit_thresholds(&windows, &cfg).unwrap();
        assert!((set.tau1_mean - 60.4).abs() < 1e-9);
        assert!((set.tau2_mean - 85.15).abs() < 1e-9);
        // tau_shape = 0.25 * median sigma(X) = 0.25 * 1.0
        assert!((set.tau_shape - 0.25).abs() < 1e-12);
    }

    #[test]
    fn fit_thresholds_negation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut windows = Vec::new();
        for _ in 0..80 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-6.0..6.0)).collect();
            windows.push(Window::new(x, Some(y), 0).unwrap());
        }
        let negated: Vec<Window> = windows
            .iter()
            .map(|w| {
                Window::new(
                    w.x_obs.iter().map(|v| -v).collect(),
                    w.y_fut.as_ref().map(|y| y.iter().map(|v| -v).collect()),
                    0,
                )
                .unwrap()
            })
            .collect();
        let cfg = ThresholdConfig::default();
        let a = fit_thresholds(&windows, &cfg).unwrap();
        let b = fit_thresholds(&negated, &cfg).unwrap();
        assert!((a.tau1_mean - b.tau1_mean).abs() < 1e-12);
        assert!((a.tau2_mean - b.tau2_mean).abs() < 1e-12);
        assert!((a.tau1_vol - b.tau1_vol).abs() < 1e-12);
        assert!((a.tau2_vol - b.tau2_vol).abs() < 1e-12);
    }

    #[test]
    fn fit_thresholds_too_few_windows() {
        let windows: Vec<Window> = (0..10)
            .map(|_| Window::new(vec![0.0, 1.0], Some(vec![1.0, 2.0]), 0).unwrap())
            .collect();
        assert!(fit_thresholds(&windows, &ThresholdConfig::default()).is_err());
    }

    #[test]
    fn fit_thresholds_degenerate_distribution() {
        // identical windows -> tau1 == tau2
        let windows: Vec<Window> = (0..60)
            .map(|_| Window::new(vec![0.0, 2.0], Some(vec![3.0, 5.0]), 0).unwrap())
            .collect();
        let err = fit_thresholds(&windows, &ThresholdConfig::default()).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn label_name_round_trip() {
        for kind in ALL_KINDS {
            for (i, name) in kind.candidates().iter().enumerate() {
                let label = PrimitiveLabel::from_name(kind, name).unwrap();
                assert_eq!(label.index(), i);
                assert_eq!(label.name(), *name);
                let upper = PrimitiveLabel::from_name(kind, &name.to_ascii_uppercase()).unwrap();
                assert_eq!(upper, label);
            }
            assert!(PrimitiveLabel::from_name(kind, "zigzag").is_none());
        }
        assert_eq!(PrimitiveKind::Lag.cardinality(), 6);
        assert_eq!(PrimitiveKind::MeanShift.cardinality(), 5);
    }

    proptest! {
        #[test]
        fn banding_exhaustive_exclusive(stat in -100.0f64..100.0, t1 in 0.01f64..5.0, gap in 0.01f64..5.0) {
            let t2 = t1 + gap;
            let label = classify_mean_shift(stat, t1, t2);
            // recompute band membership from the printed conditions
            let memberships = [
                stat > t2,
                t1 < stat && stat <= t2,
                -t1 <= stat && stat <= t1,
                -t2 <= stat && stat < -t1,
                stat < -t2,
            ];
            prop_assert_eq!(memberships.iter().filter(|m| **m).count(), 1);
            prop_assert!(memberships[label.index()]);
        }

        #[test]
        fn shift_invariance_of_labels(
            seed in 0u64..1000,
            offset in -50.0f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let xs: Vec<f64> = x.iter().map(|v| v + offset).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + offset).collect();
            let thr = test_threshold_set();
            let a = extract_all(&x, &y, &thr).unwrap();
            let b = extract_all(&xs, &ys, &thr).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn lag_profile_invariants(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..12).map(|_| rng.gen_range(-9.0..9.0)).collect();
            let p = lag_profile(&x, &y, 4, 0.5, 1e-8).unwrap();
            let sum: f64 = p.pi.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.centroid_c >= 0.0 && p.centroid_c <= 1.0);
            prop_assert!(p.tail_d >= 0.0 && p.tail_d <= 1.0);
            prop_assert!(p.peak_q >= 1.0 / 4.0 - 1e-12);
        }
    }
}
