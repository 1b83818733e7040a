//! Time-series containers, window slicing, per-instance normalization,
//! patching and differencing. Everything here is pure and immutable after
//! construction; all model math operates on the designated target channel.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TessError};

/// Default floor for the normalization scale.
pub const EPS_NORM: f64 = 1e-8;

/// A multichannel series with strictly increasing timestamps.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    timestamps: Vec<i64>,
    values: Vec<Vec<f64>>,
    channel_names: Vec<String>,
    target_channel: usize,
}

impl TimeSeries {
    pub fn new(
        timestamps: Vec<i64>,
        values: Vec<Vec<f64>>,
        channel_names: Vec<String>,
        target_channel: usize,
    ) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(TessError::InvalidSeries(format!(
                "{} timestamps but {} value rows",
                timestamps.len(),
                values.len()
            )));
        }
        for pair in timestamps.windows(2) {
            if pair[1] <= pair[0] {
                return Err(TessError::InvalidSeries(format!(
                    "timestamps not strictly increasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        let width = channel_names.len();
        if width == 0 {
            return Err(TessError::InvalidSeries("no channels".into()));
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != width {
                return Err(TessError::InvalidSeries(format!(
                    "row {} has {} values, expected {}",
                    i,
                    row.len(),
                    width
                )));
            }
        }
        if target_channel >= width {
            return Err(TessError::InvalidSeries(format!(
                "target channel {} out of range (d = {})",
                target_channel, width
            )));
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
            target_channel,
        })
    }

    /// Convenience constructor for a univariate series with synthetic timestamps.
    pub fn univariate(values: Vec<f64>) -> Self {
        let timestamps = (0..values.len() as i64).collect();
        let rows = values.into_iter().map(|v| vec![v]).collect();
        Self::new(timestamps, rows, vec!["value".into()], 0)
            .expect("univariate construction is always valid")
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn target_channel(&self) -> usize {
        self.target_channel
    }

    pub fn target_values(&self) -> Vec<f64> {
        self.values.iter().map(|r| r[self.target_channel]).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    /// Sub-series over `[start, end)`, keeping channel layout and target.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(TessError::InvalidArgument(format!(
                "slice [{start}, {end}) out of range for series of length {}",
                self.len()
            )));
        }
        Self::new(
            self.timestamps[start..end].to_vec(),
            self.values[start..end].to_vec(),
            self.channel_names.clone(),
            self.target_channel,
        )
    }
}

/// One observation window plus an optional forecast segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Window {
    pub x_obs: Vec<f64>,
    pub y_fut: Option<Vec<f64>>,
    pub origin_index: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_covariates: Option<Vec<Vec<f64>>>,
}

impl Window {
    pub fn new(x_obs: Vec<f64>, y_fut: Option<Vec<f64>>, origin_index: usize) -> Result<Self> {
        if x_obs.len() < 2 {
            return Err(TessError::InvalidWindow(format!(
                "observation length {} < 2",
                x_obs.len()
            )));
        }
        if let Some(y) = &y_fut {
            if y.len() < 2 {
                return Err(TessError::InvalidWindow(format!(
                    "forecast length {} < 2",
                    y.len()
                )));
            }
        }
        Ok(Self {
            x_obs,
            y_fut,
            origin_index,
            raw_covariates: None,
        })
    }

    pub fn obs_len(&self) -> usize {
        self.x_obs.len()
    }

    pub fn horizon(&self) -> usize {
        self.y_fut.as_ref().map_or(0, |y| y.len())
    }

    /// Forecast segment or an error when the window carries none.
    pub fn future(&self) -> Result<&[f64]> {
        self.y_fut
            .as_deref()
            .ok_or_else(|| TessError::InvalidWindow("window has no forecast segment".into()))
    }
}

/// Per-instance normalization statistics (mean and scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub s: f64,
}

/// Patch layout over a normalized window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_len: usize,
    pub stride: usize,
    pub count: usize,
}

impl PatchGrid {
    pub fn new(input_len: usize, patch_len: usize, stride: usize) -> Result<Self> {
        if patch_len == 0 || stride == 0 {
            return Err(TessError::InvalidArgument(
                "patch length and stride must be >= 1".into(),
            ));
        }
        if patch_len > input_len {
            return Err(TessError::InvalidArgument(format!(
                "patch length {patch_len} exceeds input length {input_len}"
            )));
        }
        let count = (input_len - patch_len) / stride + 1;
        Ok(Self {
            patch_len,
            stride,
            count,
        })
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation (divide by n).
pub fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Slide fixed-length windows over the target channel.
///
/// Origins run 0, step, 2*step, ...; each window carries `L` observed values
/// and, when `horizon > 0`, the following `horizon` values as its forecast
/// segment.
pub fn slide_windows(
    series: &TimeSeries,
    obs_len: usize,
    horizon: usize,
    step: usize,
) -> Result<Vec<Window>> {
    if obs_len < 2 {
        return Err(TessError::InvalidArgument(format!(
            "window length {obs_len} < 2"
        )));
    }
    if step == 0 {
        return Err(TessError::InvalidArgument("step must be >= 1".into()));
    }
    let required = obs_len + horizon;
    if series.len() < required {
        return Err(TessError::InsufficientLength {
            required,
            actual: series.len(),
        });
    }
    let target = series.target_values();
    let count = (series.len() - required) / step + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let origin = w * step;
        let x_obs = target[origin..origin + obs_len].to_vec();
        let y_fut = if horizon > 0 {
            Some(target[origin + obs_len..origin + obs_len + horizon].to_vec())
        } else {
            None
        };
        let mut window = Window::new(x_obs, y_fut, origin)?;
        window.raw_covariates = Some(
            (origin..origin + obs_len)
                .map(|i| series.row(i).to_vec())
                .collect(),
        );
        out.push(window);
    }
    Ok(out)
}

/// Standardize a window: `x_norm = (x - mean) / max(pop_std, eps)`.
pub fn instance_normalize(x: &[f64], eps: f64) -> Result<(Vec<f64>, NormStats)> {
    if x.len() < 2 {
        return Err(TessError::InvalidArgument(format!(
            "normalization needs >= 2 values, got {}",
            x.len()
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(TessError::NonFinite(format!("input value {bad}")));
    }
    let mu = mean(x);
    let s = pop_std(x).max(eps);
    let x_norm = x.iter().map(|v| (v - mu) / s).collect();
    Ok((x_norm, NormStats { mu, s }))
}

/// Invert [`instance_normalize`]: `x = s * x_norm + mu`.
pub fn inverse_normalize(x_norm: &[f64], stats: NormStats) -> Vec<f64> {
    x_norm.iter().map(|v| stats.s * v + stats.mu).collect()
}

/// Segment a window into overlapping patches, dropping any trailing remainder.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    let grid = PatchGrid::new(x.len(), patch_len, stride)?;
    let mut rows = Vec::with_capacity(grid.count);
    for i in 0..grid.count {
        let start = i * stride;
        rows.push(x[start..start + patch_len].to_vec());
    }
    Ok(rows)
}

/// First-order differences: `out[i] = v[i+1] - v[i]`.
pub fn first_difference(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(TessError::InvalidArgument(format!(
            "differencing needs >= 2 values, got {}",
            v.len()
        )));
    }
    Ok(v.windows(2).map(|p| p[1] - p[0]).collect())
}
