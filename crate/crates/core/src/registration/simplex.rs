//! Nelder–Mead minimisation with a fixed initial simplex.

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best value after each iteration.
    pub trace: Vec<f64>,
}

/// Minimises `f` from `x0`, the initial simplex spanned by `steps` along
/// the axes. Stops when the spread of vertex values falls below
/// `tol · max(1, |best|)` or after `max_iter` iterations.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    max_iter: usize,
    tol: f64,
) -> SimplexResult {
    let d = x0.len();
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut p = x0.to_vec();
        p[i] += steps[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| sanitize(f(p))).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if vals[d] - vals[0] <= tol * vals[0].abs().max(1.0) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; d];
        for p in &pts[..d] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[d])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = sanitize(f(&xr));
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = sanitize(f(&xe));
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
        } else {
            let (xc, fc) = if fr < vals[d] {
                let xc = along(-0.5);
                let fc = sanitize(f(&xc));
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = sanitize(f(&xc));
                (xc, fc)
            };
            if fc < vals[d].min(fr) {
                pts[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    let p: Vec<f64> = pts[0].iter().zip(&pts[i]).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    vals[i] = sanitize(f(&p));
                    pts[i] = p;
                }
            }
        }
        trace.push(vals.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    let best = (0..=d)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)))
        .expect("simplex has vertices");
    SimplexResult {
        x: pts[best].clone(),
        value: vals[best],
        iterations,
        converged,
        trace,
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_rosenbrock_minimum() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize(f, &[-1.2, 1.0], &[0.5, 0.5], 2000, 1e-14);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn trace_never_increases() {
        let f = |x: &[f64]| x.iter().map(|v| (v - 0.3).powi(2)).sum::<f64>();
        let r = minimize(f, &[0.0; 4], &[0.1; 4], 300, 1e-12);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.value < 1e-8);
    }

    #[test]
    fn stops_at_the_cap() {
        let f = |x: &[f64]| x[0].powi(2) + x[1].powi(2);
        let r = minimize(f, &[5.0, 5.0], &[1.0, 1.0], 3, 0.0);
        assert_eq!(r.iterations, 3);
        assert!(!r.converged);
    }
}
