//! Dense eigenvalues, Gershgorin discs, and linear-stability classification
//! of `du/dt = -A u`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::AssembledOperator;

pub const DEFAULT_STABILITY_TOL: f64 = 1e-8;
/// Largest operator analysed densely by default.
pub const DENSE_CAP: usize = 1024;

const RADIX: f64 = 2.0;
const MAX_SWEEPS_PER_EIGENVALUE: usize = 60;

/// Eigenvalues of a real square matrix, sorted by real then imaginary part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Spectral("matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut m = a.clone();
    balance(&mut m);
    let mut h = m.hessenberg().h();
    let mut ev = hessenberg_qr(&mut h)?;
    sort_complex(&mut ev);
    Ok(ev)
}

pub fn sort_complex(v: &mut [Complex64]) {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
}

/// Diagonal similarity scaling by powers of two so rows and columns have
/// comparable norms.
fn balance(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= sqrdx;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= sqrdx;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let gi = 1.0 / f;
                for j in 0..n {
                    a[(i, j)] *= gi;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix, with
/// exceptional shifts every ten sweeps to break symmetric stalls such as
/// those of circulant matrices. The matrix is destroyed.
fn hessenberg_qr(a: &mut DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[(i, j)].abs();
        }
    }
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 1 {
                let mut s = a[(l - 1, l - 1)].abs() + a[(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[(l, l - 1)].abs() + s == s {
                    a[(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[(nu, nu)];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a[(nu - 1, nu - 1)];
            let mut w = a[(nu, nu - 1)] * a[(nu - 1, nu)];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    let z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }
            if its == MAX_SWEEPS_PER_EIGENVALUE {
                return Err(Error::Spectral(format!("no convergence after {its} sweeps at index {nu}")));
            }
            if its > 0 && its % 10 == 0 {
                t += x;
                for i in 0..=nu {
                    a[(i, i)] -= x;
                }
                let s = a[(nu, nu - 1)].abs() + a[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;

            let mut m = nu - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = a[(m, m)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[(m + 1, m)] + a[(m, m + 1)];
                q = a[(m + 1, m + 1)] - z - rr - ss;
                r = a[(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[(m, m - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[(m - 1, m - 1)].abs() + z.abs() + a[(m + 1, m + 1)].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[(i, i - 2)] = 0.0;
                if i != m + 2 {
                    a[(i, i - 3)] = 0.0;
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[(k, k - 1)];
                    q = a[(k + 1, k - 1)];
                    r = if k != nu - 1 { a[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[(k, k - 1)] = -a[(k, k - 1)];
                        }
                    } else {
                        a[(k, k - 1)] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[(k, j)] + q * a[(k + 1, j)];
                        if k != nu - 1 {
                            pp += r * a[(k + 2, j)];
                            a[(k + 2, j)] -= pp * z;
                        }
                        a[(k + 1, j)] -= pp * y;
                        a[(k, j)] -= pp * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * a[(i, k)] + y * a[(i, k + 1)];
                        if k != nu - 1 {
                            pp += z * a[(i, k + 2)];
                            a[(i, k + 2)] -= pp * r;
                        }
                        a[(i, k + 1)] -= pp * q;
                        a[(i, k)] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex64::new(re, im)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disc {
    pub center: f64,
    pub radius: f64,
}

impl Disc {
    pub fn contains(&self, z: Complex64, tol: f64) -> bool {
        (z - Complex64::new(self.center, 0.0)).norm() <= self.radius + tol
    }
}

/// Discs of an assembled operator computed row by row (no dense view).
pub fn gershgorin_discs(a: &AssembledOperator) -> Vec<Disc> {
    (0..a.n())
        .map(|i| {
            let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
            for (j, c) in a.row_entries(i) {
                *cols.entry(j).or_insert(0.0) += c;
            }
            let center = cols.get(&i).copied().unwrap_or(0.0);
            let radius = cols.iter().filter(|(j, _)| **j != i).map(|(_, v)| v.abs()).sum();
            Disc { center, radius }
        })
        .collect()
}

pub fn gershgorin_discs_dense(a: &DMatrix<f64>) -> Vec<Disc> {
    (0..a.nrows())
        .map(|i| Disc {
            center: a[(i, i)],
            radius: (0..a.ncols()).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    /// Eigenvalues of the system matrix `-A`.
    pub eigenvalues: Vec<Complex64>,
    pub max_real_part_neg_op: f64,
    /// Gershgorin discs of `A`.
    pub discs: Vec<Disc>,
    pub stable: bool,
    pub tol: f64,
}

impl SpectralReport {
    /// Every row has a nonnegative centre that covers its radius.
    pub fn rows_dominant(&self, tol: f64) -> bool {
        self.discs.iter().all(|d| d.center - d.radius >= -tol)
    }
}

/// Classify `du/dt = -A u`: stable iff `max Re(lambda(-A)) <= tol`.
pub fn stability_report(a: &AssembledOperator, tol: f64) -> Result<SpectralReport> {
    stability_report_capped(a, tol, DENSE_CAP)
}

pub fn stability_report_capped(a: &AssembledOperator, tol: f64, cap: usize) -> Result<SpectralReport> {
    if a.n() > cap {
        return Err(Error::Spectral(format!(
            "operator with {} DOFs exceeds the dense cap of {cap}",
            a.n()
        )));
    }
    let neg = -a.to_dense();
    let eigenvalues = eigenvalues(&neg)?;
    Ok(report_from(eigenvalues, gershgorin_discs(a), tol))
}

/// Report without a spectrum: stability then rests on the discs alone
/// (`stable` is true only when every disc lies in the closed right half
/// plane of `A`).
pub fn disc_report(a: &AssembledOperator, tol: f64) -> SpectralReport {
    let discs = gershgorin_discs(a);
    let bound = discs
        .iter()
        .map(|d| d.radius - d.center)
        .fold(f64::NEG_INFINITY, f64::max);
    SpectralReport {
        eigenvalues: Vec::new(),
        max_real_part_neg_op: bound,
        stable: bound <= tol,
        discs,
        tol,
    }
}

fn report_from(eigenvalues: Vec<Complex64>, discs: Vec<Disc>, tol: f64) -> SpectralReport {
    let max_re = eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    SpectralReport {
        stable: max_re <= tol,
        max_real_part_neg_op: max_re,
        eigenvalues,
        discs,
        tol,
    }
}

/// `(c/dx)(1 - exp(-2 pi i k / n))`, the spectrum of the periodic
/// backward-difference operator `c L1`.
pub fn circulant_backward_difference(c: f64, dx: f64, n: usize) -> Vec<Complex64> {
    let mut v: Vec<Complex64> = (0..n)
        .map(|k| {
            let th = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, th)) * (c / dx)
        })
        .collect();
    sort_complex(&mut v);
    v
}

/// Greedy nearest matching distance between two eigenvalue multisets.
pub fn max_matching_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for z in a {
        let (k, d) = b
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, w)| (k, (z - w).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("equal lengths");
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}
