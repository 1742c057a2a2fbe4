//! Spectral measurement instruments: radial-band relative log amplitudes,
//! low/high frequency decomposition and per-step band statistics.
//!
//! All radii are Euclidean distances in grid cells from the centre
//! `(⌊H/2⌋, ⌊W/2⌋)` of the shifted spectrum.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffusion::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::fft::{check_pow2, fft2_in_place, fftshift, ifftshift, real_spectrum};
use crate::tensor::Tensor;

/// Floor added before taking logs of magnitudes.
pub const LOG_FLOOR: f64 = 1e-8;

/// Default number of radial bands for 32x32 fields.
pub const DEFAULT_BANDS: usize = 8;

/// Imaginary residue above which a masked inverse transform is rejected.
pub const MAX_IMAG_RESIDUE: f64 = 1e-3;

/// Radius of every cell of the centred `h x w` grid, row-major.
pub fn centered_radii(h: usize, w: usize) -> Vec<f64> {
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(((y as f64 - ch).powi(2) + (x as f64 - cw).powi(2)).sqrt());
        }
    }
    out
}

/// Index of the conjugate-mirror cell of centred index `i` on an axis of length `n`.
pub(crate) fn mirror_index(i: usize, n: usize) -> usize {
    (2 * (n / 2) + n - i) % n
}

/// Averages a centred mask with its conjugate mirror so real inputs stay real.
pub(crate) fn symmetrize_centered(mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let m = mirror_index(y, h) * w + mirror_index(x, w);
            out[y * w + x] = 0.5 * (mask[y * w + x] + mask[m]);
        }
    }
    out
}

/// Applies a centred real mask to a real plane and returns the real part,
/// rejecting the result if the imaginary residue exceeds [`MAX_IMAG_RESIDUE`].
pub(crate) fn filter_plane(
    op: &'static str,
    plane: &[f32],
    h: usize,
    w: usize,
    centered_mask: &[f64],
) -> Result<Vec<f32>> {
    let spec = fftshift(&real_spectrum(plane, h, w), h, w);
    let masked: Vec<Complex64> = spec
        .iter()
        .zip(centered_mask)
        .map(|(c, &m)| c * m)
        .collect();
    let mut buf = ifftshift(&masked, h, w);
    fft2_in_place(&mut buf, h, w, true);
    let residue = buf.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    if residue > MAX_IMAG_RESIDUE {
        return Err(Error::ImaginaryResidue { op, residue });
    }
    Ok(buf.iter().map(|c| c.re as f32).collect())
}

/// Radial-band log amplitudes relative to the DC coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    /// `K + 1` ascending band edges in grid cells, starting at 0.
    pub band_edges: Vec<f64>,
    /// `K` values: `log(mean |F| in band + ε) − log(|F(DC)| + ε)`.
    pub values: Vec<f64>,
}

impl SpectrumProfile {
    pub fn bands(&self) -> usize {
        self.values.len()
    }

    /// Mean of the values over bands `[start, end)`.
    pub fn mean_over(&self, start: usize, end: usize) -> f64 {
        let s = &self.values[start..end];
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Mean over the top quartile of bands (at least one band).
    pub fn top_quartile_mean(&self) -> f64 {
        let k = self.bands();
        self.mean_over(k - (k / 4).max(1), k)
    }

    /// Element-wise mean of equally banded profiles.
    pub fn average(profiles: &[SpectrumProfile]) -> Result<SpectrumProfile> {
        let first = profiles
            .first()
            .ok_or_else(|| Error::invalid("average", "no profiles"))?;
        let mut values = vec![0.0; first.bands()];
        for p in profiles {
            if p.band_edges != first.band_edges {
                return Err(Error::invalid("average", "profiles use different band edges"));
            }
            for (a, b) in values.iter_mut().zip(&p.values) {
                *a += b;
            }
        }
        for v in &mut values {
            *v /= profiles.len() as f64;
        }
        Ok(SpectrumProfile {
            band_edges: first.band_edges.clone(),
            values,
        })
    }

    /// `band_lo,band_hi,rel_log_amp` with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band_lo,band_hi,rel_log_amp\n");
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_sig9(self.band_edges[k]),
                fmt_sig9(self.band_edges[k + 1]),
                fmt_sig9(*v)
            ));
        }
        out
    }
}

/// Formats like C's `%.9g`.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..9).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    strip_zeros(&format!("{x:.decimals$}")).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Band index of every centred cell, `bands` uniform bands up to the max radius
/// (the last band is closed so the corner cells are included).
fn band_assignment(h: usize, w: usize, bands: usize) -> (Vec<f64>, Vec<usize>) {
    let radii = centered_radii(h, w);
    let r_max = radii.iter().copied().fold(0.0, f64::max);
    let edges: Vec<f64> = (0..=bands)
        .map(|k| r_max * k as f64 / bands as f64)
        .collect();
    let assign = radii
        .iter()
        .map(|&r| {
            if r_max == 0.0 {
                0
            } else {
                ((r / r_max * bands as f64).floor() as usize).min(bands - 1)
            }
        })
        .collect();
    (edges, assign)
}

fn profile_from_plane(plane: &[f32], h: usize, w: usize, bands: usize) -> SpectrumProfile {
    let spec = fftshift(&real_spectrum(plane, h, w), h, w);
    let (band_edges, assign) = band_assignment(h, w, bands);
    let mut sums = vec![0.0f64; bands];
    let mut counts = vec![0usize; bands];
    for (c, &b) in spec.iter().zip(&assign) {
        sums[b] += c.norm();
        counts[b] += 1;
    }
    let dc = spec[(h / 2) * w + w / 2].norm();
    let dc_log = (dc + LOG_FLOOR).ln();
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| {
            let mean = if n == 0 { 0.0 } else { s / n as f64 };
            (mean + LOG_FLOOR).ln() - dc_log
        })
        .collect();
    SpectrumProfile { band_edges, values }
}

/// Relative log amplitude profile of one real 2D field.
///
/// Bands with no cells (tiny grids) report a band mean of 0.
pub fn relative_log_amplitude(field: &Tensor, bands: usize) -> Result<SpectrumProfile> {
    if bands < 2 {
        return Err(Error::invalid("relative_log_amplitude", "need at least 2 bands"));
    }
    if !field.is_finite() {
        return Err(Error::NonFinite {
            op: "relative_log_amplitude",
        });
    }
    let [h, w] = field.dims2()?;
    check_pow2("relative_log_amplitude", h, w)?;
    Ok(profile_from_plane(field.data(), h, w, bands))
}

/// Per-channel profiles of `[N, C, H, W]` features averaged over channels and batch.
pub fn feature_spectrum(features: &Tensor, bands: usize) -> Result<SpectrumProfile> {
    if bands < 2 {
        return Err(Error::invalid("feature_spectrum", "need at least 2 bands"));
    }
    let [n, c, h, w] = features.dims4()?;
    check_pow2("feature_spectrum", h, w)?;
    let profiles: Vec<SpectrumProfile> = features
        .data()
        .chunks_exact(h * w)
        .map(|plane| profile_from_plane(plane, h, w, bands))
        .collect();
    debug_assert_eq!(profiles.len(), n * c);
    SpectrumProfile::average(&profiles)
}

/// Binary centred mask, 1 where `r < r_cut`.
fn lowpass_mask(h: usize, w: usize, r_cut: f64) -> Vec<f64> {
    let raw: Vec<f64> = centered_radii(h, w)
        .into_iter()
        .map(|r| if r < r_cut { 1.0 } else { 0.0 })
        .collect();
    symmetrize_centered(&raw, h, w)
}

/// Splits an image into the parts carried by frequencies below and at/above `r_cut`.
pub fn split_low_high(image: &Tensor, r_cut: f64) -> Result<(Tensor, Tensor)> {
    let [h, w] = image.dims2()?;
    check_pow2("split_low_high", h, w)?;
    let low_mask = lowpass_mask(h, w, r_cut);
    let high_mask: Vec<f64> = low_mask.iter().map(|m| 1.0 - m).collect();
    let low = filter_plane("split_low_high", image.data(), h, w, &low_mask)?;
    let high = filter_plane("split_low_high", image.data(), h, w, &high_mask)?;
    Ok((
        Tensor::new(image.shape().to_vec(), low)?,
        Tensor::new(image.shape().to_vec(), high)?,
    ))
}

/// Mean `|F|` over the cells with `r < r_cut` and over those with `r ≥ r_cut`.
pub fn band_means(plane: &[f32], h: usize, w: usize, r_cut: f64) -> (f64, f64) {
    let spec = fftshift(&real_spectrum(plane, h, w), h, w);
    let radii = centered_radii(h, w);
    let (mut lo, mut nlo, mut hi, mut nhi) = (0.0, 0usize, 0.0, 0usize);
    for (c, r) in spec.iter().zip(radii) {
        if r < r_cut {
            lo += c.norm();
            nlo += 1;
        } else {
            hi += c.norm();
            nhi += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(lo, nlo), mean(hi, nhi))
}

/// One row of [`trajectory_band_stats`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStatRow {
    pub t: usize,
    pub low: f64,
    pub high: f64,
    /// `|low_k − low_{k−1}|`, 0 on the first row.
    pub delta_low: f64,
    pub delta_high: f64,
}

/// Per-step low/high band mean magnitudes of the recorded `x_t`, averaged over
/// batch items, plus absolute step-to-step deltas.
pub fn trajectory_band_stats(record: &TrajectoryRecord, r_cut: f64) -> Result<Vec<BandStatRow>> {
    if record.steps.is_empty() {
        return Err(Error::invalid("trajectory_band_stats", "empty trajectory"));
    }
    let mut rows: Vec<BandStatRow> = Vec::with_capacity(record.steps.len());
    for step in &record.steps {
        let [n, c, h, w] = step.x_t.dims4()?;
        check_pow2("trajectory_band_stats", h, w)?;
        let planes = step.x_t.data().chunks_exact(h * w);
        let (mut lo, mut hi) = (0.0, 0.0);
        for plane in planes {
            let (l, hh) = band_means(plane, h, w, r_cut);
            lo += l;
            hi += hh;
        }
        let k = (n * c) as f64;
        let (low, high) = (lo / k, hi / k);
        let (delta_low, delta_high) = match rows.last() {
            Some(prev) => ((low - prev.low).abs(), (high - prev.high).abs()),
            None => (0.0, 0.0),
        };
        rows.push(BandStatRow {
            t: step.t,
            low,
            high,
            delta_low,
            delta_high,
        });
    }
    Ok(rows)
}

/// `t,low,high,delta_low,delta_high` with 9 significant digits.
pub fn band_stats_csv(rows: &[BandStatRow]) -> String {
    let mut out = String::from("t,low,high,delta_low,delta_high\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t,
            fmt_sig9(r.low),
            fmt_sig9(r.high),
            fmt_sig9(r.delta_low),
            fmt_sig9(r.delta_high)
        ));
    }
    out
}
