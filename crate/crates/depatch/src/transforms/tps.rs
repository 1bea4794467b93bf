//! Thin plate spline warping over a jittered control grid, used to simulate
//! non-rigid clothing deformation.
//!
//! The warp is defined by the inverse map: control sites are the *displaced*
//! grid points, values are the original ones, so sampling the input at
//! `f(p)` moves content from each original point exactly onto its displaced
//! position. Solving the interpolation system is a dense
//! `(k^2 + 3) x (k^2 + 3)` elimination; the coefficients are constants of
//! the warp, so gradients only flow through the bilinear resampling.

use rand::Rng;

use crate::autodiff::{bilinear_taps, Tap4};

/// Radial basis: `U(r^2) = r^2 ln(r^2)`, zero at the origin.
fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

#[derive(Debug, Clone)]
pub struct TpsWarp {
    sites: Vec<(f64, f64)>,
    wx: Vec<f64>,
    wy: Vec<f64>,
    ax: [f64; 3],
    ay: [f64; 3],
}

impl TpsWarp {
    /// Fit the interpolating spline `f(site_i) = value_i`. Returns `None`
    /// when the system is singular (degenerate control layout).
    pub fn fit(sites: &[(f64, f64)], values: &[(f64, f64)]) -> Option<TpsWarp> {
        let n = sites.len();
        assert_eq!(n, values.len());
        if n < 3 {
            return None;
        }
        let dim = n + 3;
        let mut a = vec![0.0; dim * dim];
        for i in 0..n {
            for j in 0..n {
                let dx = sites[i].0 - sites[j].0;
                let dy = sites[i].1 - sites[j].1;
                a[i * dim + j] = kernel(dx * dx + dy * dy);
            }
            a[i * dim + n] = 1.0;
            a[i * dim + n + 1] = sites[i].0;
            a[i * dim + n + 2] = sites[i].1;
            a[n * dim + i] = 1.0;
            a[(n + 1) * dim + i] = sites[i].0;
            a[(n + 2) * dim + i] = sites[i].1;
        }
        let mut bx = vec![0.0; dim];
        let mut by = vec![0.0; dim];
        for i in 0..n {
            bx[i] = values[i].0;
            by[i] = values[i].1;
        }
        let sol = solve2(a, dim, &mut bx, &mut by)?;
        let (sx, sy) = sol;
        Some(TpsWarp {
            sites: sites.to_vec(),
            wx: sx[..n].to_vec(),
            wy: sy[..n].to_vec(),
            ax: [sx[n], sx[n + 1], sx[n + 2]],
            ay: [sy[n], sy[n + 1], sy[n + 2]],
        })
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let mut ox = self.ax[0] + self.ax[1] * x + self.ax[2] * y;
        let mut oy = self.ay[0] + self.ay[1] * x + self.ay[2] * y;
        for (i, s) in self.sites.iter().enumerate() {
            let dx = x - s.0;
            let dy = y - s.1;
            let u = kernel(dx * dx + dy * dy);
            ox += self.wx[i] * u;
            oy += self.wy[i] * u;
        }
        (ox, oy)
    }
}

/// Gaussian elimination with partial pivoting, two right-hand sides.
fn solve2(
    mut a: Vec<f64>,
    dim: usize,
    bx: &mut [f64],
    by: &mut [f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    for col in 0..dim {
        let mut pivot = col;
        let mut best = a[col * dim + col].abs();
        for row in col + 1..dim {
            let v = a[row * dim + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-10 {
            return None;
        }
        if pivot != col {
            for k in 0..dim {
                a.swap(col * dim + k, pivot * dim + k);
            }
            bx.swap(col, pivot);
            by.swap(col, pivot);
        }
        let inv = 1.0 / a[col * dim + col];
        for row in col + 1..dim {
            let f = a[row * dim + col] * inv;
            if f == 0.0 {
                continue;
            }
            for k in col..dim {
                a[row * dim + k] -= f * a[col * dim + k];
            }
            bx[row] -= f * bx[col];
            by[row] -= f * by[col];
        }
    }
    let mut sx = vec![0.0; dim];
    let mut sy = vec![0.0; dim];
    for row in (0..dim).rev() {
        let mut vx = bx[row];
        let mut vy = by[row];
        for k in row + 1..dim {
            vx -= a[row * dim + k] * sx[k];
            vy -= a[row * dim + k] * sy[k];
        }
        let inv = 1.0 / a[row * dim + row];
        sx[row] = vx * inv;
        sy[row] = vy * inv;
    }
    Some((sx, sy))
}

/// Regular `k x k` control grid over a `w x h` patch, in pixel coordinates.
pub fn control_grid(w: usize, h: usize, k: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(k * k);
    for gy in 0..k {
        for gx in 0..k {
            pts.push((
                gx as f64 * (w - 1) as f64 / (k - 1) as f64,
                gy as f64 * (h - 1) as f64 / (k - 1) as f64,
            ));
        }
    }
    pts
}

/// Build the bilinear taps of a jittered-grid TPS warp, or `None` when the
/// fit is singular and the caller should fall back to identity.
pub fn plan_tps_taps(
    w: usize,
    h: usize,
    jitter: f64,
    k: usize,
    rng: &mut impl Rng,
) -> Option<Vec<Tap4>> {
    let src = control_grid(w, h, k);
    let dst: Vec<(f64, f64)> = src
        .iter()
        .map(|&(x, y)| {
            (
                x + jitter * w as f64 * rng.gen_range(-1.0..=1.0),
                y + jitter * h as f64 * rng.gen_range(-1.0..=1.0),
            )
        })
        .collect();
    plan_tps_taps_for(w, h, &src, &dst)
}

/// Taps for an explicit control-point displacement `src -> dst`.
pub fn plan_tps_taps_for(
    w: usize,
    h: usize,
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
) -> Option<Vec<Tap4>> {
    let warp = TpsWarp::fit(dst, src)?;
    let coords = (0..w * h).map(move |i| {
        let y = (i / w) as f64;
        let x = (i % w) as f64;
        warp.map(x, y)
    });
    Some(bilinear_taps(h, w, coords))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_constraint_holds() {
        let src = control_grid(32, 32, 4);
        let mut dst = src.clone();
        dst[5] = (src[5].0 + 4.0, src[5].1 - 3.0);
        let warp = TpsWarp::fit(&dst, &src).unwrap();
        for (d, s) in dst.iter().zip(&src) {
            let (mx, my) = warp.map(d.0, d.1);
            assert!((mx - s.0).abs() < 1e-6 && (my - s.1).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_grid_gives_identity_map() {
        let src = control_grid(16, 16, 4);
        let warp = TpsWarp::fit(&src, &src).unwrap();
        for x in 0..16 {
            for y in 0..16 {
                let (mx, my) = warp.map(x as f64, y as f64);
                assert!((mx - x as f64).abs() < 1e-8);
                assert!((my - y as f64).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn collinear_sites_are_singular() {
        let sites: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let values = sites.clone();
        assert!(TpsWarp::fit(&sites, &values).is_none());
    }
}
