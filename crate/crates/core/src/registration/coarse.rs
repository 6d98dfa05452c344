//! Lattice period and orientation from the spectrum of a central crop.

use std::f64::consts::TAU;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::RegistrationError;
use crate::geometry::Point;
use crate::raster::LinearRaster;
use crate::screen::ScreenPattern;

/// Below this the estimate is reported as `NoPatternFound`.
pub const MIN_CONFIDENCE: f64 = 0.2;
/// Relative half-width of the period search around the nominal value.
pub const CAPTURE_RANGE: f64 = 0.2;
const MAX_CROP: usize = 1024;
const MAX_HARMONIC: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    /// Lattice harmonic indices along the screen axes.
    pub harmonic: [i32; 2],
    /// Frequency in cycles per scan pixel.
    pub frequency: Point,
    /// Peak amplitude relative to a full-contrast sinusoid.
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseEstimate {
    /// Scan pixels per tile.
    pub period_px: f64,
    pub rotation_deg: f64,
    /// Scan position of a lattice origin.
    pub phase_px: Point,
    pub confidence: f64,
    /// The spectrum cannot tell rotations that differ by this angle apart.
    pub ambiguity_deg: f64,
    /// Strongest peak over the median spectral magnitude of the annulus.
    pub peak_ratio: f64,
    pub peaks: Vec<SpectralPeak>,
}

/// Harmonic `(h, k)` of the lattice with the largest class-mask amplitude
/// at that frequency.
#[derive(Debug, Clone, Copy)]
struct Harmonic {
    h: i32,
    k: i32,
    weight: f64,
}

/// Fourier amplitudes of the class masks over one tile, sampled on a fine
/// grid. The scan's amplitude at a harmonic is a scene-weighted mix of
/// these.
fn lattice_harmonics(pattern: &ScreenPattern) -> Vec<Harmonic> {
    const S: usize = 96;
    let mut classes = vec![0usize; S * S];
    for j in 0..S {
        for i in 0..S {
            let p = [(i as f64 + 0.5) / S as f64, (j as f64 + 0.5) / S as f64];
            classes[j * S + i] = pattern.color_at(p).index();
        }
    }
    let mut out = Vec::new();
    for k in -MAX_HARMONIC..=MAX_HARMONIC {
        for h in -MAX_HARMONIC..=MAX_HARMONIC {
            // One of each conjugate pair.
            if k < 0 || (k == 0 && h <= 0) {
                continue;
            }
            let mut acc = [Complex64::new(0.0, 0.0); 3];
            for j in 0..S {
                for i in 0..S {
                    let x = (i as f64 + 0.5) / S as f64;
                    let y = (j as f64 + 0.5) / S as f64;
                    let a = -TAU * (h as f64 * x + k as f64 * y);
                    acc[classes[j * S + i]] += Complex64::from_polar(1.0, a);
                }
            }
            let weight = acc.iter().map(|c| c.norm()).fold(0.0, f64::max) / (S * S) as f64;
            out.push(Harmonic { h, k, weight });
        }
    }
    let top = out.iter().map(|h| h.weight).fold(0.0, f64::max);
    out.retain(|h| h.weight >= 0.2 * top && top > 0.0);
    out
}

/// Whether the harmonic set looks the same after a quarter turn.
fn quarter_turn_symmetric(hs: &[Harmonic]) -> bool {
    let has = |h: i32, k: i32| {
        hs.iter()
            .any(|x| (x.h == h && x.k == k) || (x.h == -h && x.k == -k))
    };
    hs.iter().all(|x| has(-x.k, x.h))
}

struct Spectrum {
    n: usize,
    /// Crop origin in scan pixels.
    x0: usize,
    y0: usize,
    /// Windowed, mean-removed crop.
    data: Vec<f64>,
    magnitude: Vec<f64>,
}

impl Spectrum {
    fn of(mono: &LinearRaster) -> Self {
        let n = mono.width().min(mono.height()).min(MAX_CROP);
        let x0 = (mono.width() - n) / 2;
        let y0 = (mono.height() - n) / 2;
        let mut data = vec![0.0; n * n];
        let mut mean = 0.0;
        for y in 0..n {
            for x in 0..n {
                let v = mono.get(x0 + x, y0 + y, 0) as f64;
                data[y * n + x] = v;
                mean += v;
            }
        }
        mean /= (n * n) as f64;
        let hann: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (TAU * (i as f64 + 0.5) / n as f64).cos())
            .collect();
        for y in 0..n {
            for x in 0..n {
                data[y * n + x] = (data[y * n + x] - mean) * hann[x] * hann[y];
            }
        }

        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        for row in buf.chunks_exact_mut(n) {
            fft.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            fft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        let magnitude = buf.iter().map(|c| c.norm()).collect();
        Self {
            n,
            x0,
            y0,
            data,
            magnitude,
        }
    }

    /// Scale from |F| to the amplitude of a sinusoid at full window gain.
    fn amplitude_scale(&self) -> f64 {
        4.0 / (self.n * self.n) as f64
    }

    /// Bilinear |F| at frequency `f` (cycles per pixel).
    fn magnitude_at(&self, f: Point) -> f64 {
        let n = self.n as f64;
        let bx = f[0] * n;
        let by = f[1] * n;
        let (fx, fy) = (bx.floor(), by.floor());
        let (tx, ty) = (bx - fx, by - fy);
        let wrap = |v: f64| (v as i64).rem_euclid(self.n as i64) as usize;
        let (x0, y0) = (wrap(fx), wrap(fy));
        let (x1, y1) = ((x0 + 1) % self.n, (y0 + 1) % self.n);
        let m = |x: usize, y: usize| self.magnitude[y * self.n + x];
        (1.0 - ty) * ((1.0 - tx) * m(x0, y0) + tx * m(x1, y0))
            + ty * ((1.0 - tx) * m(x0, y1) + tx * m(x1, y1))
    }

    /// Exact transforms at a grid of frequencies `fx[i] × fy[j]`, with the
    /// phase referred to scan pixel centres.
    fn dft_grid(&self, fx: &[f64], fy: &[f64]) -> Vec<Complex64> {
        let n = self.n;
        let twiddles = |f: f64, off: usize| -> Vec<Complex64> {
            (0..n)
                .map(|i| Complex64::from_polar(1.0, -TAU * f * ((off + i) as f64 + 0.5)))
                .collect()
        };
        let ty: Vec<Vec<Complex64>> = fy.iter().map(|&f| twiddles(f, self.y0)).collect();
        let mut out = vec![Complex64::new(0.0, 0.0); fx.len() * fy.len()];
        for (i, &u) in fx.iter().enumerate() {
            let tx = twiddles(u, self.x0);
            let rows: Vec<Complex64> = self
                .data
                .chunks_exact(n)
                .map(|row| row.iter().zip(&tx).map(|(&v, t)| t * v).sum())
                .collect();
            for (j, t) in ty.iter().enumerate() {
                out[j * fx.len() + i] = rows.iter().zip(t).map(|(r, t)| r * t).sum();
            }
        }
        out
    }

    /// Power-weighted centroid of the spectrum within `radius` bins of `f`,
    /// re-centred until it settles. Scene modulation of a carrier spreads
    /// its power symmetrically, so the centroid stays on the carrier where
    /// the local maximum would not.
    fn centroid_peak(&self, f: Point, radius: f64) -> (Point, f64, f64) {
        let n = self.n as f64;
        let mut c = [f[0] * n, f[1] * n];
        let mut power = 0.0;
        let mut peak = 0.0;
        let r = radius.ceil() as i64;
        for _ in 0..20 {
            let (cx, cy) = (c[0].round() as i64, c[1].round() as i64);
            let (mut sw, mut sx, mut sy, mut top) = (0.0, 0.0, 0.0, 0.0f64);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (bx, by) = ((cx + dx) as f64, (cy + dy) as f64);
                    if (bx - c[0]).hypot(by - c[1]) > radius {
                        continue;
                    }
                    let ix = (cx + dx).rem_euclid(self.n as i64) as usize;
                    let iy = (cy + dy).rem_euclid(self.n as i64) as usize;
                    let m = self.magnitude[iy * self.n + ix];
                    top = top.max(m);
                    let w = m * m;
                    sw += w;
                    sx += w * bx;
                    sy += w * by;
                }
            }
            if !(sw > 0.0) {
                break;
            }
            let next = [sx / sw, sy / sw];
            let shift = (next[0] - c[0]).hypot(next[1] - c[1]);
            c = next;
            power = sw;
            peak = top;
            if shift < 1e-6 {
                break;
            }
        }
        // A centroid that wandered off its disk found no peak there.
        if (c[0] - f[0] * n).hypot(c[1] - f[1] * n) > radius {
            return (f, 0.0, 0.0);
        }
        ([c[0] / n, c[1] / n], power, peak)
    }

    /// Median |F| over an annulus of frequency radii.
    fn background(&self, r_lo: f64, r_hi: f64) -> f64 {
        let n = self.n as i64;
        let mut vals = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let fx = if x > n / 2 { x - n } else { x } as f64 / n as f64;
                let fy = if y > n / 2 { y - n } else { y } as f64 / n as f64;
                let r = fx.hypot(fy);
                if r >= r_lo && r <= r_hi {
                    vals.push(self.magnitude[(y * n + x) as usize]);
                }
            }
        }
        crate::geometry::median(&mut vals)
    }
}

fn harmonic_frequency(h: &Harmonic, period: f64, theta: f64) -> Point {
    let (s, c) = theta.sin_cos();
    let (a, b) = (h.h as f64, h.k as f64);
    [(a * c - b * s) / period, (a * s + b * c) / period]
}

fn wrap_angle(deg: f64, range: f64) -> f64 {
    let half = 0.5 * range;
    (deg + half).rem_euclid(range) - half
}

/// Period, rotation and phase of the screen lattice in a mono scan.
pub fn coarse_estimate(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    nominal_ppi: f64,
) -> Result<CoarseEstimate, RegistrationError> {
    if mono.channels() != 1 {
        return Err(RegistrationError::NotMono(mono.channels()));
    }
    if !(nominal_ppi > 0.0 && nominal_ppi.is_finite()) {
        return Err(RegistrationError::BadInput(format!("nominal ppi {nominal_ppi}")));
    }
    let nominal = nominal_ppi / 25.4 * pattern.tile_period_mm();
    let harmonics = lattice_harmonics(pattern);
    let spec = Spectrum::of(mono);
    let n = spec.n as f64;
    if harmonics.is_empty() || spec.n < 16 || nominal * (1.0 - CAPTURE_RANGE) < 2.0 * MAX_HARMONIC as f64 {
        return Err(RegistrationError::NoPatternFound(0.0));
    }
    let ambiguity: f64 = if quarter_turn_symmetric(&harmonics) { 90.0 } else { 180.0 };

    // Grid search with steps of about a quarter bin at the fundamental.
    let r_bins = n / nominal;
    let rot_step = 0.25 / r_bins;
    let scale_step = 0.25 / r_bins;
    let n_rot = (ambiguity.to_radians() / rot_step).ceil() as usize;
    let n_scale = (2.0 * CAPTURE_RANGE / scale_step).ceil() as usize + 1;
    let (mut best, mut best_p, mut best_t) = (-1.0, nominal, 0.0);
    for si in 0..n_scale {
        let period = nominal * (1.0 - CAPTURE_RANGE + si as f64 * scale_step);
        for ti in 0..n_rot {
            let theta = -0.5 * ambiguity.to_radians() + ti as f64 * rot_step;
            let score: f64 = harmonics
                .iter()
                .map(|h| h.weight * spec.magnitude_at(harmonic_frequency(h, period, theta)))
                .sum();
            if score > best {
                best = score;
                best_p = period;
                best_t = theta;
            }
        }
    }

    // Refine each harmonic peak, then solve for the fundamental. The
    // centroid disk stays clear of the neighbouring harmonics.
    let radius = 0.3 * r_bins;
    let mut peaks = Vec::new();
    let mut rows = Vec::new();
    for h in &harmonics {
        let (f, power, peak) = spec.centroid_peak(harmonic_frequency(h, best_p, best_t), radius);
        let v = spec.dft_grid(&[f[0]], &[f[1]])[0];
        let amplitude = peak * spec.amplitude_scale();
        peaks.push(SpectralPeak {
            harmonic: [h.h, h.k],
            frequency: f,
            amplitude,
            phase: v.arg(),
        });
        rows.push((h, f, v, power));
    }
    let top = peaks.iter().map(|p| p.amplitude).fold(0.0, f64::max);
    let top_power = rows.iter().map(|r| r.3).fold(0.0, f64::max);
    // f = h·(u, v) + k·(-v, u), weighted by amplitude².
    let (mut ata, mut atb) = (nalgebra::Matrix2::<f64>::zeros(), nalgebra::Vector2::<f64>::zeros());
    for (h, f, _, power) in &rows {
        let w = power / top_power.max(1e-300);
        let (a, b) = (h.h as f64, h.k as f64);
        for (row, rhs) in [([a, -b], f[0]), ([b, a], f[1])] {
            for r in 0..2 {
                for c in 0..2 {
                    ata[(r, c)] += w * row[r] * row[c];
                }
                atb[r] += w * row[r] * rhs;
            }
        }
    }
    let (period_px, rotation_deg) = match ata.try_inverse() {
        Some(inv) if top > 0.0 => {
            let b = inv * atb;
            (1.0 / b.x.hypot(b.y), wrap_angle(b.y.atan2(b.x).to_degrees(), ambiguity))
        }
        _ => (best_p, best_t.to_degrees()),
    };

    // Lattice offset o from g·o = -arg/2π over the strongest peaks.
    let theta = rotation_deg.to_radians();
    let mut sorted: Vec<&(&Harmonic, Point, Complex64, f64)> = rows.iter().collect();
    sorted.sort_by(|a, b| b.3.total_cmp(&a.3));
    let mut phase_px = [0.0, 0.0];
    let mut m = nalgebra::Matrix2::<f64>::zeros();
    let mut rhs = nalgebra::Vector2::<f64>::zeros();
    let mut used = 0;
    for (h, _, v, _) in sorted {
        let g = harmonic_frequency(h, period_px, theta);
        if used == 1 && (m[(0, 0)] * g[1] - m[(0, 1)] * g[0]).abs() < 1e-9 {
            continue;
        }
        m[(used, 0)] = g[0];
        m[(used, 1)] = g[1];
        rhs[used] = -v.arg() / TAU;
        used += 1;
        if used == 2 {
            break;
        }
    }
    if used == 2 {
        if let Some(inv) = m.try_inverse() {
            let o = inv * rhs;
            phase_px = [o.x, o.y];
        }
    } else if used == 1 {
        let g = [m[(0, 0)], m[(0, 1)]];
        let g2 = g[0] * g[0] + g[1] * g[1];
        phase_px = [g[0] * rhs[0] / g2, g[1] * rhs[0] / g2];
    }

    let min_r = harmonics
        .iter()
        .map(|h| ((h.h * h.h + h.k * h.k) as f64).sqrt())
        .fold(f64::INFINITY, f64::min);
    let max_r = harmonics
        .iter()
        .map(|h| ((h.h * h.h + h.k * h.k) as f64).sqrt())
        .fold(0.0, f64::max);
    let background = spec.background(
        0.5 * min_r / nominal,
        (1.5 * max_r / nominal).min(0.5),
    ) * spec.amplitude_scale();
    let peak_ratio = if top < 1e-6 {
        0.0
    } else {
        top / background.max(1e-300)
    };
    let confidence = confidence_from_ratio(peak_ratio);
    let estimate = CoarseEstimate {
        period_px,
        rotation_deg,
        phase_px,
        confidence,
        ambiguity_deg: ambiguity,
        peak_ratio,
        peaks,
    };
    let in_range = period_px > nominal * (1.0 - CAPTURE_RANGE) * 0.95 && period_px < nominal * (1.0 + CAPTURE_RANGE) * 1.05;
    if confidence < MIN_CONFIDENCE || !in_range {
        return Err(RegistrationError::NoPatternFound(confidence));
    }
    Ok(estimate)
}

/// Monotone map from peak prominence to `[0, 1]`.
pub fn confidence_from_ratio(ratio: f64) -> f64 {
    if ratio <= 0.0 {
        0.0
    } else {
        (1.0 - 8.0 / ratio).clamp(0.0, 1.0)
    }
}
