use serde::{Deserialize, Serialize};

use super::{PatchGrid, RenderError};
use crate::raster::{LinearRaster, SourceTag};
use crate::screen::{ColorClass, ScreenPattern};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    CatmullRom,
    Bilinear,
}

const MAX_MISSING: f64 = 0.2;
const INFILL_PASSES: usize = 10;

pub fn demosaic(grid: &PatchGrid, pattern: &ScreenPattern) -> Result<LinearRaster, RenderError> {
    demosaic_with(grid, pattern, Interpolation::CatmullRom)
}

/// Full RGB at every patch site. Each class occupies a union of square
/// sub-lattices of period `n`; every sub-lattice is interpolated
/// separately and the results averaged. At a class's own sites the grid
/// value is copied.
pub fn demosaic_with(
    grid: &PatchGrid,
    pattern: &ScreenPattern,
    interp: Interpolation,
) -> Result<LinearRaster, RenderError> {
    let (w, h) = (grid.width(), grid.height());
    if w < 4 || h < 4 {
        return Err(RenderError::TooSmall(w, h));
    }
    let missing = grid.missing_fraction();
    if missing > MAX_MISSING {
        return Err(RenderError::TooSparse(missing));
    }
    let n = pattern.sites_per_tile().min(w).min(h);
    let values = infill(grid);

    let mut out = vec![0.0f32; w * h * 3];
    for class in ColorClass::ALL {
        let c = class.index();
        let offsets: Vec<(usize, usize)> = (0..n)
            .flat_map(|v| (0..n).map(move |u| (u, v)))
            .filter(|&(u, v)| grid.class_at(u, v) == class)
            .collect();
        if offsets.is_empty() {
            continue;
        }
        let mut acc = vec![0.0f64; w * h];
        for &(u, v) in &offsets {
            let part = interpolate_sublattice(&values, w, h, u, v, pattern.sites_per_tile(), interp);
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        let k = offsets.len() as f64;
        for j in 0..h {
            for i in 0..w {
                let idx = j * w + i;
                let v = if grid.class_at(i, j) == class {
                    values[idx]
                } else {
                    acc[idx] / k
                };
                out[idx * 3 + c] = v as f32;
            }
        }
    }
    LinearRaster::new(w, h, 3, out, grid.patch_ppi(), SourceTag::PositiveTransparency)
        .map_err(|e| RenderError::BadParams(e.to_string()))
}

/// Grid values with missing sites filled by repeated same-class neighbour
/// averaging, falling back to the class mean.
fn infill(grid: &PatchGrid) -> Vec<f64> {
    let (w, h) = (grid.width(), grid.height());
    let n = grid.sites_per_tile() as isize;
    let mut values: Vec<f64> = (0..w * h)
        .map(|k| grid.mean(k % w, k / w).unwrap_or(f64::NAN))
        .collect();
    for _ in 0..INFILL_PASSES {
        let holes: Vec<usize> = (0..w * h).filter(|&k| values[k].is_nan()).collect();
        if holes.is_empty() {
            return values;
        }
        let mut updates = Vec::with_capacity(holes.len());
        for &k in &holes {
            let (i, j) = ((k % w) as isize, (k / w) as isize);
            let class = grid.class_at(i as usize, j as usize);
            let (mut sum, mut cnt) = (0.0, 0usize);
            for dj in -n..=n {
                for di in -n..=n {
                    let (x, y) = (i + di, j + dj);
                    if (di, dj) == (0, 0) || x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    let v = values[y * w + x];
                    if !v.is_nan() && grid.class_at(x, y) == class {
                        sum += v;
                        cnt += 1;
                    }
                }
            }
            if cnt > 0 {
                updates.push((k, sum / cnt as f64));
            }
        }
        if updates.is_empty() {
            break;
        }
        for (k, v) in updates {
            values[k] = v;
        }
    }
    let mut means = [(0.0, 0usize); 3];
    for (k, v) in values.iter().enumerate() {
        if !v.is_nan() {
            let c = grid.class_at(k % w, k / w).index();
            means[c].0 += v;
            means[c].1 += 1;
        }
    }
    for (k, v) in values.iter_mut().enumerate() {
        if v.is_nan() {
            let (s, c) = means[grid.class_at(k % w, k / w).index()];
            *v = if c > 0 { s / c as f64 } else { 0.0 };
        }
    }
    values
}

/// Sample `k` of a 1-D sequence, linearly extrapolated past either end.
#[inline]
fn extended(s: &[f64], k: isize) -> f64 {
    let m = s.len() as isize;
    if m == 1 {
        return s[0];
    }
    if k < 0 {
        s[0] + k as f64 * (s[1] - s[0])
    } else if k >= m {
        s[(m - 1) as usize] + (k - m + 1) as f64 * (s[(m - 1) as usize] - s[(m - 2) as usize])
    } else {
        s[k as usize]
    }
}

/// Interpolation taps for position `t` in sample units.
fn taps(t: f64, interp: Interpolation) -> (isize, [f64; 4]) {
    let k0 = t.floor();
    let f = t - k0;
    let w = match interp {
        Interpolation::CatmullRom => {
            let (f2, f3) = (f * f, f * f * f);
            [
                0.5 * (-f3 + 2.0 * f2 - f),
                0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
                0.5 * (-3.0 * f3 + 4.0 * f2 + f),
                0.5 * (f3 - f2),
            ]
        }
        Interpolation::Bilinear => [0.0, 1.0 - f, f, 0.0],
    };
    (k0 as isize - 1, w)
}

#[inline]
fn eval(s: &[f64], k_start: isize, w: &[f64; 4]) -> f64 {
    let mut acc = 0.0;
    for (d, wd) in w.iter().enumerate() {
        if *wd != 0.0 {
            acc += wd * extended(s, k_start + d as isize);
        }
    }
    acc
}

/// Separable interpolation of the sub-lattice `{(u + k n, v + l n)}` to all sites.
fn interpolate_sublattice(
    values: &[f64],
    w: usize,
    h: usize,
    u: usize,
    v: usize,
    n: usize,
    interp: Interpolation,
) -> Vec<f64> {
    let mk = (w - u).div_ceil(n);
    let ml = (h - v).div_ceil(n);
    let col_taps: Vec<(isize, [f64; 4])> = (0..w)
        .map(|i| taps((i as f64 - u as f64) / n as f64, interp))
        .collect();
    let row_taps: Vec<(isize, [f64; 4])> = (0..h)
        .map(|j| taps((j as f64 - v as f64) / n as f64, interp))
        .collect();

    // Along x for every sample row.
    let mut rows = vec![0.0f64; ml * w];
    let mut samples = vec![0.0f64; mk];
    for l in 0..ml {
        let y = v + l * n;
        for (k, s) in samples.iter_mut().enumerate() {
            *s = values[y * w + u + k * n];
        }
        for (i, (k0, tw)) in col_taps.iter().enumerate() {
            rows[l * w + i] = eval(&samples, *k0, tw);
        }
    }

    // Along y for every column.
    let mut out = vec![0.0f64; w * h];
    let mut column = vec![0.0f64; ml];
    for i in 0..w {
        for (l, c) in column.iter_mut().enumerate() {
            *c = rows[l * w + i];
        }
        for (j, (l0, tw)) in row_taps.iter().enumerate() {
            out[j * w + i] = eval(&column, *l0, tw);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::{pattern_preset, ProcessId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from(pattern: &ScreenPattern, w: usize, h: usize, f: impl Fn(usize, usize, ColorClass) -> Option<f64>) -> PatchGrid {
        let origin = [0, 0];
        let vals: Vec<Option<f64>> = (0..w * h)
            .map(|k| {
                let (i, j) = (k % w, k / w);
                f(i, j, pattern.site_class(i as i64, j as i64))
            })
            .collect();
        PatchGrid::from_values(pattern, origin, w, h, &vals)
    }

    #[test]
    fn constant_grid_stays_constant() {
        for id in [ProcessId::Paget, ProcessId::Joly, ProcessId::Dufay] {
            let p = pattern_preset(id).unwrap();
            let g = grid_from(&p, 12, 12, |_, _, _| Some(0.375));
            let out = demosaic(&g, &p).unwrap();
            assert!(out.samples().iter().all(|&v| (v - 0.375).abs() < 1e-6));
        }
    }

    #[test]
    fn per_class_bilinear_ramps_are_exact() {
        let p = pattern_preset(ProcessId::Paget).unwrap();
        let f = |i: usize, j: usize, c: ColorClass| {
            let (x, y) = (i as f64, j as f64);
            match c {
                ColorClass::R => 0.1 + 0.01 * x + 0.005 * y,
                ColorClass::G => 0.2 + 0.0004 * x * y,
                ColorClass::B => 0.7 - 0.01 * y,
            }
        };
        let g = grid_from(&p, 20, 16, |i, j, c| Some(f(i, j, c)));
        let out = demosaic(&g, &p).unwrap();
        for j in 0..16 {
            for i in 0..20 {
                for c in ColorClass::ALL {
                    let got = out.get(i, j, c.index()) as f64;
                    assert!((got - f(i, j, c)).abs() < 1e-6, "{i},{j},{c}: {got}");
                }
            }
        }
    }

    /// Direct 2-D kernel sum over a linearly extended sample array.
    fn direct_oracle(g: &PatchGrid, class: ColorClass, n: usize, i: usize, j: usize) -> f64 {
        let k = |x: f64| {
            let a = x.abs();
            if a < 1.0 {
                1.5 * a.powi(3) - 2.5 * a * a + 1.0
            } else if a < 2.0 {
                -0.5 * a.powi(3) + 2.5 * a * a - 4.0 * a + 2.0
            } else {
                0.0
            }
        };
        let (w, h) = (g.width(), g.height());
        let mut total = 0.0;
        let mut count = 0;
        for v in 0..n {
            for u in 0..n {
                if g.class_at(u, v) != class {
                    continue;
                }
                let mk = (w - u).div_ceil(n) as isize;
                let ml = (h - v).div_ceil(n) as isize;
                let pad = 4isize;
                let s = |a: isize, b: isize| g.mean(u + a as usize * n, v + b as usize * n).unwrap();
                let ext1 = |f: &dyn Fn(isize) -> f64, m: isize, a: isize| {
                    if a < 0 {
                        f(0) + a as f64 * (f(1) - f(0))
                    } else if a >= m {
                        f(m - 1) + (a - m + 1) as f64 * (f(m - 1) - f(m - 2))
                    } else {
                        f(a)
                    }
                };
                let e = |a: isize, b: isize| {
                    let row = |bb: isize| ext1(&|aa| s(aa, bb), mk, a);
                    ext1(&row, ml, b)
                };
                let tx = (i as f64 - u as f64) / n as f64;
                let ty = (j as f64 - v as f64) / n as f64;
                let mut acc = 0.0;
                for b in -pad..ml + pad {
                    for a in -pad..mk + pad {
                        let wgt = k(tx - a as f64) * k(ty - b as f64);
                        if wgt != 0.0 {
                            acc += wgt * e(a, b);
                        }
                    }
                }
                total += acc;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn matches_direct_kernel_evaluation() {
        let p = pattern_preset(ProcessId::Paget).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<Option<f64>> = (0..256).map(|_| Some(rng.random_range(0.3..0.7))).collect();
        let g = PatchGrid::from_values(&p, [0, 0], 16, 16, &vals);
        let out = demosaic(&g, &p).unwrap();
        for j in 0..16 {
            for i in 0..16 {
                for c in ColorClass::ALL {
                    let want = if g.class_at(i, j) == c {
                        g.mean(i, j).unwrap()
                    } else {
                        direct_oracle(&g, c, 2, i, j)
                    };
                    // Outputs are stored as f32.
                    let got = out.get(i, j, c.index()) as f64;
                    assert!((got - want.clamp(0.0, 1.0)).abs() < 1e-6, "{i},{j},{c}");
                }
            }
        }
        // Full precision on the f64 path.
        let values = infill(&g);
        let part = interpolate_sublattice(&values, 16, 16, 1, 0, 2, Interpolation::CatmullRom);
        for j in 0..16 {
            for i in 0..16 {
                let want = direct_oracle(&g, ColorClass::R, 2, i, j);
                assert!((part[j * 16 + i] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn own_sites_are_copied_exactly() {
        let p = pattern_preset(ProcessId::Thames).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<Option<f64>> = (0..100).map(|_| Some(rng.random_range(0.0..1.0))).collect();
        let g = PatchGrid::from_values(&p, [3, -5], 10, 10, &vals);
        let out = demosaic(&g, &p).unwrap();
        for j in 0..10 {
            for i in 0..10 {
                let c = g.class_at(i, j).index();
                assert_eq!(out.get(i, j, c), g.mean(i, j).unwrap() as f32);
            }
        }
    }

    #[test]
    fn missing_patches_in_filled_or_rejected() {
        let p = pattern_preset(ProcessId::Paget).unwrap();
        let g = grid_from(&p, 12, 12, |i, j, _| if (i + 3 * j) % 11 == 0 { None } else { Some(0.5) });
        let out = demosaic(&g, &p).unwrap();
        assert!(out.samples().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let sparse = grid_from(&p, 12, 12, |i, _, _| if i < 4 { None } else { Some(0.5) });
        assert!(matches!(demosaic(&sparse, &p), Err(RenderError::TooSparse(_))));
        let tiny = grid_from(&p, 3, 8, |_, _, _| Some(0.5));
        assert_eq!(demosaic(&tiny, &p).unwrap_err(), RenderError::TooSmall(3, 8));
    }

    #[test]
    fn bilinear_option_reproduces_ramps() {
        let p = pattern_preset(ProcessId::Joly).unwrap();
        let g = grid_from(&p, 15, 9, |i, j, _| Some(0.2 + 0.02 * i as f64 + 0.01 * j as f64));
        let out = demosaic_with(&g, &p, Interpolation::Bilinear).unwrap();
        for j in 0..9 {
            for i in 0..15 {
                let want = 0.2 + 0.02 * i as f64 + 0.01 * j as f64;
                for c in 0..3 {
                    assert!((out.get(i, j, c) as f64 - want).abs() < 1e-6);
                }
            }
        }
    }
}
