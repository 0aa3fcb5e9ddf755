//! Allocation-free small dense routines and flat message storage used by the
//! tree passes. Matrices are row-major slices; message precisions are kept
//! embedded in full q×q storage with zeros outside the finite coordinates.

use crate::error::{Error, Result};
use crate::gaussian::{PrecisionClass, MAX_CONDITION};
use crate::linalg::LN_2PI;

/// In-place lower Cholesky factor of the leading n×n block of `a` (stride n).
/// The strict upper triangle is zeroed. Returns false if not positive definite.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

pub(crate) fn chol_log_det(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}

/// Solves L y = b in place.
pub(crate) fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves Lᵀ x = b in place.
pub(crate) fn backward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves (L Lᵀ) x = b in place.
pub(crate) fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    forward_solve(l, n, b);
    backward_solve(l, n, b);
}

/// Writes (L Lᵀ)⁻¹ into `out` (n×n), exactly symmetric.
pub(crate) fn chol_inverse(l: &[f64], n: usize, out: &mut [f64]) {
    // L⁻¹ into the lower triangle of out
    for c in 0..n {
        for r in 0..c {
            out[r * n + c] = 0.0;
        }
        out[c * n + c] = 1.0 / l[c * n + c];
        for r in (c + 1)..n {
            let mut s = 0.0;
            for k in c..r {
                s -= l[r * n + k] * out[k * n + c];
            }
            out[r * n + c] = s / l[r * n + r];
        }
    }
    // out = L⁻ᵀ L⁻¹ in place; row i of L⁻¹ is only read while producing row i
    for i in 0..n {
        let dii = out[i * n + i];
        for j in 0..=i {
            let mut s = dii * out[i * n + j];
            for k in (i + 1)..n {
                s += out[k * n + i] * out[k * n + j];
            }
            out[i * n + j] = s;
        }
        for j in 0..i {
            out[j * n + i] = out[i * n + j];
        }
    }
}

/// Maximum absolute column sum of an n×n row-major matrix.
pub(crate) fn norm_1(a: &[f64], n: usize) -> f64 {
    (0..n).map(|c| (0..n).map(|r| a[r * n + c].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Reusable buffers sized for q traits.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub idx: Vec<usize>,
    pub idx2: Vec<usize>,
    pub pos: Vec<usize>,
}

impl Scratch {
    pub fn new(q: usize) -> Self {
        Scratch {
            a: vec![0.0; q * q],
            b: vec![0.0; q * q],
            c: vec![0.0; q * q],
            v: vec![0.0; q],
            w: vec![0.0; q],
            idx: Vec::with_capacity(q),
            idx2: Vec::with_capacity(q),
            pos: Vec::with_capacity(q),
        }
    }
}

/// One message in flat form.
pub(crate) struct FlatRef<'a> {
    pub classes: &'a [PrecisionClass],
    pub mean: &'a [f64],
    pub block: &'a [f64],
    pub log_r: f64,
}

pub(crate) struct FlatMut<'a> {
    pub classes: &'a mut [PrecisionClass],
    pub mean: &'a mut [f64],
    pub block: &'a mut [f64],
}

/// Inverts the SPD sub-block of `emb` (q×q) on `idx` into `out` (|idx|×|idx|)
/// after a 1-norm condition check. Uses `work` for the factor.
fn checked_sub_inverse(emb: &[f64], q: usize, idx: &[usize], work: &mut [f64], out: &mut [f64]) -> Result<()> {
    let f = idx.len();
    for (x, &i) in idx.iter().enumerate() {
        for (y, &j) in idx.iter().enumerate() {
            work[x * f + y] = emb[i * q + j];
        }
    }
    let norm = norm_1(&work[..f * f], f);
    if !cholesky_in_place(&mut work[..f * f], f) {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    chol_inverse(&work[..f * f], f, &mut out[..f * f]);
    let cond = norm * norm_1(&out[..f * f], f);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    Ok(())
}

/// Branch deflation. Writes Q embedded into `out.block`, copies the mean, and
/// returns log det of Q on its support.
pub(crate) fn deflate(
    msg: &FlatRef,
    t: f64,
    sigma: &[f64],
    q: usize,
    out: &mut FlatMut,
    s: &mut Scratch,
) -> Result<f64> {
    out.mean.copy_from_slice(msg.mean);
    out.block.iter_mut().for_each(|v| *v = 0.0);
    s.idx.clear();
    s.pos.clear();
    s.idx2.clear();
    for k in 0..q {
        let c = msg.classes[k];
        out.classes[k] = if c == PrecisionClass::Zero { PrecisionClass::Zero } else { PrecisionClass::Finite };
        if c != PrecisionClass::Zero {
            if c == PrecisionClass::Finite {
                s.pos.push(s.idx.len());
                s.idx2.push(k);
            }
            s.idx.push(k);
        }
    }
    let n = s.idx.len();
    if n == 0 {
        return Ok(0.0);
    }
    let f = s.idx2.len();
    if f > 0 {
        checked_sub_inverse(msg.block, q, &s.idx2, &mut s.a, &mut s.b)?;
    }
    // T = tΣ_SS + B⁻¹ at finite positions
    for x in 0..n {
        for y in 0..n {
            s.a[x * n + y] = t * sigma[s.idx[x] * q + s.idx[y]];
        }
    }
    for x in 0..f {
        for y in 0..f {
            s.a[s.pos[x] * n + s.pos[y]] += s.b[x * f + y];
        }
    }
    if !cholesky_in_place(&mut s.a[..n * n], n) {
        return Err(Error::NotPositiveDefinite("deflation matrix T".into()));
    }
    let ld = chol_log_det(&s.a[..n * n], n);
    chol_inverse(&s.a[..n * n], n, &mut s.b[..n * n]);
    for x in 0..n {
        for y in 0..n {
            out.block[s.idx[x] * q + s.idx[y]] = s.b[x * n + y];
        }
    }
    Ok(-ld)
}

/// Combines two deflated children (Finite/Zero only) into the parent message;
/// returns the parent log remainder.
pub(crate) fn combine(
    a: &FlatRef,
    ld_a: f64,
    b: &FlatRef,
    ld_b: f64,
    q: usize,
    out: &mut FlatMut,
    s: &mut Scratch,
) -> Result<f64> {
    let mut na = 0;
    let mut nb = 0;
    s.idx.clear();
    for k in 0..q {
        let (ca, cb) = (a.classes[k], b.classes[k]);
        if ca == PrecisionClass::Infinite || cb == PrecisionClass::Infinite {
            return Err(Error::InfiniteLabel);
        }
        na += (ca == PrecisionClass::Finite) as usize;
        nb += (cb == PrecisionClass::Finite) as usize;
        let any = ca == PrecisionClass::Finite || cb == PrecisionClass::Finite;
        out.classes[k] = if any { PrecisionClass::Finite } else { PrecisionClass::Zero };
        if any {
            s.idx.push(k);
        }
    }
    let mut quad_children = 0.0;
    for i in 0..q {
        let mut ra = 0.0;
        let mut rb = 0.0;
        for j in 0..q {
            let (qa, qb) = (a.block[i * q + j], b.block[i * q + j]);
            out.block[i * q + j] = qa + qb;
            ra += qa * a.mean[j];
            rb += qb * b.mean[j];
        }
        s.v[i] = ra + rb;
        quad_children += a.mean[i] * ra + b.mean[i] * rb;
    }
    out.mean.iter_mut().for_each(|v| *v = 0.0);
    let n = s.idx.len();
    let mut log_r = a.log_r + b.log_r;
    if n == 0 {
        return Ok(log_r);
    }
    for x in 0..n {
        s.w[x] = s.v[s.idx[x]];
        for y in 0..n {
            s.a[x * n + y] = out.block[s.idx[x] * q + s.idx[y]];
        }
    }
    if !cholesky_in_place(&mut s.a[..n * n], n) {
        return Err(Error::NotPositiveDefinite("parent precision".into()));
    }
    let ld_p = chol_log_det(&s.a[..n * n], n);
    let mut quad_parent = 0.0;
    s.c[..n].copy_from_slice(&s.w[..n]);
    chol_solve(&s.a[..n * n], n, &mut s.c[..n]);
    for x in 0..n {
        quad_parent += s.c[x] * s.w[x];
        out.mean[s.idx[x]] = s.c[x];
    }
    let delta = (na + nb - n) as f64;
    log_r += 0.5 * ld_a + 0.5 * ld_b - 0.5 * ld_p - 0.5 * delta * LN_2PI - 0.5 * (quad_children - quad_parent);
    Ok(log_r)
}

/// Result of integrating the root message against the root prior.
pub(crate) struct RootFlat {
    pub log_likelihood: f64,
    /// q×q posterior precision of the root value and its mean.
    pub precision: Vec<f64>,
    pub mean: Vec<f64>,
}

/// `sigma_inv` is Σ⁻¹ (q×q); `ld_sigma_inv` its log determinant.
pub(crate) fn integrate_root(
    msg: &FlatRef,
    mu0: &[f64],
    kappa: f64,
    sigma_inv: &[f64],
    ld_sigma_inv: f64,
    q: usize,
    s: &mut Scratch,
) -> Result<RootFlat> {
    if msg.classes.contains(&PrecisionClass::Infinite) {
        return Err(Error::InfiniteLabel);
    }
    let mut precision: Vec<f64> = sigma_inv.iter().map(|v| v * kappa).collect();
    // prior_rhs = κΣ⁻¹μ₀
    let mut rhs = vec![0.0; q];
    let mut quad_prior = 0.0;
    for i in 0..q {
        let mut r = 0.0;
        for j in 0..q {
            r += precision[i * q + j] * mu0[j];
        }
        rhs[i] = r;
        quad_prior += mu0[i] * r;
    }
    s.idx.clear();
    s.idx.extend((0..q).filter(|&k| msg.classes[k] == PrecisionClass::Finite));
    let n = s.idx.len();
    if n == 0 {
        // every root term cancels against the prior
        return Ok(RootFlat { log_likelihood: msg.log_r, precision, mean: mu0.to_vec() });
    }
    let mut quad_root = 0.0;
    for i in 0..q {
        let mut pm = 0.0;
        for j in 0..q {
            let p = msg.block[i * q + j];
            precision[i * q + j] += p;
            pm += p * msg.mean[j];
        }
        rhs[i] += pm;
        quad_root += msg.mean[i] * pm;
    }
    for x in 0..n {
        for y in 0..n {
            s.a[x * n + y] = msg.block[s.idx[x] * q + s.idx[y]];
        }
    }
    if !cholesky_in_place(&mut s.a[..n * n], n) {
        return Err(Error::NotPositiveDefinite("root precision".into()));
    }
    let ld_root = chol_log_det(&s.a[..n * n], n);
    s.b.copy_from_slice(&precision);
    if !cholesky_in_place(&mut s.b, q) {
        return Err(Error::NotPositiveDefinite("root posterior precision".into()));
    }
    let ld_full = chol_log_det(&s.b, q);
    let mut mean = rhs.clone();
    chol_solve(&s.b, q, &mut mean);
    let quad_full: f64 = mean.iter().zip(&rhs).map(|(a, b)| a * b).sum();
    let ld_prior = q as f64 * kappa.ln() + ld_sigma_inv;
    let ll = msg.log_r - 0.5 * n as f64 * LN_2PI + 0.5 * ld_root + 0.5 * ld_prior - 0.5 * ld_full
        - 0.5 * (quad_root + quad_prior - quad_full);
    Ok(RootFlat { log_likelihood: ll, precision, mean })
}
