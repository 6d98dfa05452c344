use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};

use super::{dist, Distortion, GeometryError, Point, RegistrationMap, ScanFrame};

#[derive(Debug, Clone)]
pub struct FitResult {
    pub map: RegistrationMap,
    /// Root-mean-square reprojection error in scan pixels.
    pub rms_px: f64,
    pub residuals_px: Vec<f64>,
}

/// Fits a map to `(screen, scan)` correspondences: normalized DLT for the
/// homography, then (optionally) radial distortion by alternating
/// least squares polished with a joint Levenberg–Marquardt step.
pub fn fit_map(
    pairs: &[(Point, Point)],
    fit_distortion: bool,
    frame: ScanFrame,
) -> Result<FitResult, GeometryError> {
    let needed = if fit_distortion { 6 } else { 4 };
    if pairs.len() < needed {
        return Err(GeometryError::TooFewPoints {
            needed,
            got: pairs.len(),
        });
    }
    let screen: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let scan: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    if collinear(&screen) || collinear(&scan) {
        return Err(GeometryError::DegenerateConfiguration);
    }

    let center = frame.center();
    let half_diag = frame.half_diagonal();
    let mut h = dlt(&screen, &scan)?;
    let mut k = Distortion::default();

    if fit_distortion {
        for _ in 0..60 {
            let k_new = fit_radial(&h, &screen, &scan, center, half_diag);
            let probe = RegistrationMap::from_parts(h, k_new, frame, center, half_diag)?;
            let undistorted: Vec<Point> = scan
                .iter()
                .map(|&q| probe.undistort(q))
                .collect::<Result<_, _>>()
                .map_err(|_| GeometryError::DegenerateConfiguration)?;
            h = dlt(&screen, &undistorted)?;
            let change = (k_new.k1 - k.k1).abs() + (k_new.k2 - k.k2).abs();
            k = k_new;
            if change < 1e-13 {
                break;
            }
        }
        (h, k) = polish(h, k, &screen, &scan, center, half_diag);
    }

    let map = RegistrationMap::new(h, k, frame, Some(center))?;
    let residuals_px: Vec<f64> = pairs
        .iter()
        .map(|&(p, q)| map.screen_to_scan(p).map(|q2| dist(q, q2)).unwrap_or(f64::INFINITY))
        .collect();
    let rms_px = (residuals_px.iter().map(|r| r * r).sum::<f64>() / residuals_px.len() as f64).sqrt();
    Ok(FitResult {
        map,
        rms_px,
        residuals_px,
    })
}

fn collinear(pts: &[Point]) -> bool {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (x, y) = (p[0] - mx, p[1] - my);
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let c = Matrix2::new(sxx, sxy, sxy, syy);
    let e = c.symmetric_eigenvalues();
    let (lo, hi) = (e[0].min(e[1]), e[0].max(e[1]));
    !(hi > 0.0) || lo / hi < 1e-10
}

/// Similarity taking the points to zero mean and mean distance √2.
fn normalizer(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let md = pts.iter().map(|p| (p[0] - mx).hypot(p[1] - my)).sum::<f64>() / n;
    let s = std::f64::consts::SQRT_2 / md;
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    [
        t[(0, 0)] * p[0] + t[(0, 1)] * p[1] + t[(0, 2)],
        t[(1, 0)] * p[0] + t[(1, 1)] * p[1] + t[(1, 2)],
    ]
}

pub(crate) fn dlt(screen: &[Point], scan: &[Point]) -> Result<Matrix3<f64>, GeometryError> {
    let t1 = normalizer(screen);
    let t2 = normalizer(scan);
    let rows = (2 * screen.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&p, &q)) in screen.iter().zip(scan).enumerate() {
        let [x, y] = transform(&t1, p);
        let [u, v] = transform(&t2, q);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        a.row_mut(r + 1)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(GeometryError::DegenerateConfiguration)?;
    let hv = v_t.row(imin);
    let hn = Matrix3::from_row_slice(&hv.iter().copied().collect::<Vec<_>>());
    let t2_inv = t2.try_inverse().ok_or(GeometryError::DegenerateConfiguration)?;
    let h = t2_inv * hn * t1;
    if h[(2, 2)].abs() < 1e-300 {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let h = h / h[(2, 2)];
    if h.determinant().abs() <= 1e-12 {
        return Err(GeometryError::DegenerateConfiguration);
    }
    Ok(h)
}

/// Linear least squares for `(k1, k2)` with the homography held fixed.
fn fit_radial(
    h: &Matrix3<f64>,
    screen: &[Point],
    scan: &[Point],
    center: Point,
    half_diag: f64,
) -> Distortion {
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for (&p, &q) in screen.iter().zip(scan) {
        let Ok(q0) = RegistrationMap::apply_homography(h, p) else { continue };
        let d = [q0[0] - center[0], q0[1] - center[1]];
        let r2 = (d[0] * d[0] + d[1] * d[1]) / (half_diag * half_diag);
        for axis in 0..2 {
            let row = Vector2::new(d[axis] * r2, d[axis] * r2 * r2);
            ata += row * row.transpose();
            atb += row * (q[axis] - q0[axis]);
        }
    }
    match ata.try_inverse() {
        Some(inv) if ata.determinant().abs() > 1e-24 => {
            let k = inv * atb;
            Distortion { k1: k[0], k2: k[1] }
        }
        _ => Distortion::default(),
    }
}

fn residual_vector(
    x: &DVector<f64>,
    screen: &[Point],
    scan: &[Point],
    center: Point,
    half_diag: f64,
) -> Option<DVector<f64>> {
    let h = Matrix3::new(x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], 1.0);
    let k = Distortion { k1: x[8], k2: x[9] };
    let mut r = DVector::zeros(2 * screen.len());
    for (i, (&p, &q)) in screen.iter().zip(scan).enumerate() {
        let q0 = RegistrationMap::apply_homography(&h, p).ok()?;
        let d = [q0[0] - center[0], q0[1] - center[1]];
        let f = k.factor(d[0].hypot(d[1]) / half_diag);
        r[2 * i] = center[0] + d[0] * f - q[0];
        r[2 * i + 1] = center[1] + d[1] * f - q[1];
    }
    Some(r)
}

/// Joint Levenberg–Marquardt over the eight homography entries and `(k1, k2)`.
fn polish(
    h: Matrix3<f64>,
    k: Distortion,
    screen: &[Point],
    scan: &[Point],
    center: Point,
    half_diag: f64,
) -> (Matrix3<f64>, Distortion) {
    let mut x = DVector::from_vec(vec![
        h[(0, 0)],
        h[(0, 1)],
        h[(0, 2)],
        h[(1, 0)],
        h[(1, 1)],
        h[(1, 2)],
        h[(2, 0)],
        h[(2, 1)],
        k.k1,
        k.k2,
    ]);
    let Some(mut r) = residual_vector(&x, screen, scan, center, half_diag) else {
        return (h, k);
    };
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let mut jac = DMatrix::zeros(r.len(), 10);
        for j in 0..10 {
            let step = 1e-7 * x[j].abs().max(if j >= 6 && j < 8 { 1e-6 } else { 1e-3 });
            let mut xp = x.clone();
            xp[j] += step;
            let mut xm = x.clone();
            xm[j] -= step;
            let (Some(rp), Some(rm)) = (
                residual_vector(&xp, screen, scan, center, half_diag),
                residual_vector(&xm, screen, scan, center, half_diag),
            ) else {
                return unpack(&x);
            };
            jac.set_column(j, &((rp - rm) / (2.0 * step)));
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for d in 0..10 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-30);
            }
            let Some(delta) = a.lu().solve(&(-&jtr)) else { break };
            let xn = &x + &delta;
            if let Some(rn) = residual_vector(&xn, screen, scan, center, half_diag) {
                let cn = rn.norm_squared();
                if cn < cost {
                    let rel = (cost - cn) / cost.max(1e-300);
                    x = xn;
                    r = rn;
                    cost = cn;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    if rel < 1e-14 {
                        return unpack(&x);
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    unpack(&x)
}

fn unpack(x: &DVector<f64>) -> (Matrix3<f64>, Distortion) {
    (
        Matrix3::new(x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], 1.0),
        Distortion { k1: x[8], k2: x[9] },
    )
}
