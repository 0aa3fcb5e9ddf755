//! Pre-order joint draw of latent node values and missing data cells.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{Message, PrecisionClass};
use crate::kernel::{self, FlatRef, Scratch};
use crate::likelihood::{
    check_aligned, DiffusionModel, FlatBuf, ParameterStamp, PostOrderPass, RootPosterior, TipLink,
};
use crate::linalg;
use crate::traits::TraitMatrix;
use crate::tree::Phylogeny;

/// Full conditional of a node value given the data below it and its parent.
#[derive(Debug, Clone)]
pub struct NodeConditional {
    pub precision: DMatrix<f64>,
    pub mean: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    /// One row per node, tips first.
    pub node_values: DMatrix<f64>,
    /// Data with missing cells imputed. Under the degenerate link this is the
    /// tip block of `node_values`.
    pub filled_data: DMatrix<f64>,
}

impl AugmentedState {
    pub fn tip_values(&self) -> DMatrix<f64> {
        self.node_values.rows(0, self.filled_data.nrows()).into_owned()
    }
}

/// R = P + Σ⁻¹/t, n = R⁻¹(P m + Σ⁻¹ x_pa / t).
pub fn node_conditional(
    msg: &Message,
    parent_value: &DVector<f64>,
    t: f64,
    sigma_inv: &DMatrix<f64>,
) -> Result<NodeConditional> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("branch length {t} must be positive")));
    }
    let p = msg.precision.embedded()?;
    let branch = sigma_inv / t;
    let precision = &p + &branch;
    let rhs = &p * &msg.mean + &branch * parent_value;
    let ch = linalg::cholesky(&precision, "node conditional precision")?;
    let mean = ch.solve(&rhs);
    Ok(NodeConditional { precision, mean })
}

pub fn sample_root<R: Rng + ?Sized>(root: &RootPosterior, rng: &mut R) -> Result<DVector<f64>> {
    linalg::sample_mvn_precision(&root.mean, &root.precision, rng)
}

fn fill_normals<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Draw from MVN(n, R⁻¹) with R = P + Σ⁻¹/t, n = R⁻¹(P m + Σ⁻¹ x_pa / t).
fn draw_node<R: Rng + ?Sized>(
    msg: &FlatRef,
    x_pa: &[f64],
    t: f64,
    sigma_inv: &[f64],
    q: usize,
    out: &mut [f64],
    s: &mut Scratch,
    rng: &mut R,
) -> Result<()> {
    if msg.classes.contains(&PrecisionClass::Infinite) {
        return Err(Error::InfiniteLabel);
    }
    let w = 1.0 / t;
    for i in 0..q {
        let mut r = 0.0;
        for j in 0..q {
            let p = msg.block[i * q + j];
            let b = sigma_inv[i * q + j] * w;
            s.a[i * q + j] = p + b;
            r += p * msg.mean[j] + b * x_pa[j];
        }
        s.v[i] = r;
    }
    if !kernel::cholesky_in_place(&mut s.a, q) {
        return Err(Error::NotPositiveDefinite("node conditional precision".into()));
    }
    kernel::chol_solve(&s.a, q, &mut s.v);
    fill_normals(&mut s.w[..q], rng);
    kernel::backward_solve(&s.a, q, &mut s.w[..q]);
    for i in 0..q {
        out[i] = s.v[i] + s.w[i];
    }
    Ok(())
}

/// `out` holds known values where `known_mask` is set; the other coordinates are
/// overwritten with a draw from the conditional of MVN(center, (scale·prec)⁻¹)
/// given the known ones: mean center_m + prec_mm⁻¹ prec_mo (center_o − known_o).
fn draw_missing<R: Rng + ?Sized>(
    prec: &[f64],
    scale: f64,
    center: &[f64],
    known_mask: &[bool],
    q: usize,
    out: &mut [f64],
    s: &mut Scratch,
    rng: &mut R,
) -> Result<()> {
    s.idx.clear();
    s.idx.extend((0..q).filter(|&j| !known_mask[j]));
    let m = s.idx.len();
    if m == 0 {
        return Ok(());
    }
    for x in 0..m {
        let i = s.idx[x];
        let mut r = 0.0;
        for j in 0..q {
            if known_mask[j] {
                r += prec[i * q + j] * (center[j] - out[j]);
            }
        }
        s.v[x] = r;
        for y in 0..m {
            s.a[x * m + y] = prec[i * q + s.idx[y]];
        }
    }
    if !kernel::cholesky_in_place(&mut s.a[..m * m], m) {
        return Err(Error::NotPositiveDefinite("missing-coordinate precision".into()));
    }
    kernel::chol_solve(&s.a[..m * m], m, &mut s.v[..m]);
    fill_normals(&mut s.w[..m], rng);
    kernel::backward_solve(&s.a[..m * m], m, &mut s.w[..m]);
    let sd = 1.0 / scale.sqrt();
    for x in 0..m {
        out[s.idx[x]] = center[s.idx[x]] + s.v[x] + s.w[x] * sd;
    }
    Ok(())
}

/// Per-pass constants for the pre-order draws.
struct TipSampler<'a> {
    q: usize,
    sigma_inv: Vec<f64>,
    gamma: Option<Vec<f64>>,
    tm: &'a TraitMatrix,
}

impl TipSampler<'_> {
    /// Draws X_i into `x` and the filled row Z_i into `z`.
    fn draw<R: Rng + ?Sized>(
        &self,
        i: usize,
        msg: &FlatRef,
        x_pa: &[f64],
        t: f64,
        x: &mut [f64],
        z: &mut [f64],
        s: &mut Scratch,
        rng: &mut R,
    ) -> Result<()> {
        let q = self.q;
        let mask = self.tm.row_mask(i);
        for j in 0..q {
            z[j] = if mask[j] { self.tm.values()[(i, j)] } else { 0.0 };
        }
        match &self.gamma {
            None => {
                if msg.classes.contains(&PrecisionClass::Finite) {
                    return Err(Error::InvalidParameter("degenerate tip message has a finite block".into()));
                }
                x.copy_from_slice(z);
                draw_missing(&self.sigma_inv, 1.0 / t, x_pa, mask, q, x, s, rng)?;
                z.copy_from_slice(x);
            }
            Some(gamma) => {
                draw_node(msg, x_pa, t, &self.sigma_inv, q, x, s, rng)?;
                draw_missing(gamma, 1.0, x, mask, q, z, s, rng)?;
            }
        }
        Ok(())
    }

    fn new<'a>(tm: &'a TraitMatrix, link: &TipLink, sigma_inv: &DMatrix<f64>) -> TipSampler<'a> {
        TipSampler {
            q: tm.n_traits(),
            sigma_inv: sigma_inv.transpose().as_slice().to_vec(),
            gamma: link.residual_precision().map(|g| g.transpose().as_slice().to_vec()),
            tm,
        }
    }
}

pub fn sample_internal<R: Rng + ?Sized>(
    msg: &Message,
    parent_value: &DVector<f64>,
    t: f64,
    sigma_inv: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("branch length {t} must be positive")));
    }
    let q = msg.dim();
    let flat = FlatBuf::from_message(msg)?;
    let si = sigma_inv.transpose();
    let mut out = vec![0.0; q];
    let mut s = Scratch::new(q);
    draw_node(&flat.as_ref(), parent_value.as_slice(), t, si.as_slice(), q, &mut out, &mut s, rng)?;
    Ok(DVector::from_vec(out))
}

/// Draws tip `i`: returns the tip node value X_i and the filled data row Z_i.
/// `msg` is the tip's own message as produced by [`crate::likelihood::init_tip_message`].
pub fn sample_tip<R: Rng + ?Sized>(
    tm: &TraitMatrix,
    i: usize,
    msg: &Message,
    link: &TipLink,
    parent_value: &DVector<f64>,
    t: f64,
    sigma_inv: &DMatrix<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("branch length {t} must be positive")));
    }
    let q = tm.n_traits();
    let sampler = TipSampler::new(tm, link, sigma_inv);
    let flat = FlatBuf::from_message(msg)?;
    let (mut x, mut z) = (vec![0.0; q], vec![0.0; q]);
    let mut s = Scratch::new(q);
    sampler.draw(i, &flat.as_ref(), parent_value.as_slice(), t, &mut x, &mut z, &mut s, rng)?;
    Ok((DVector::from_vec(x), DVector::from_vec(z)))
}

/// One joint draw of all node values and missing cells given the observed data.
/// `pass` must come from [`crate::likelihood::post_order`] under the same
/// `model` and `link`.
pub fn sample_augmented<R: Rng + ?Sized>(
    tree: &Phylogeny,
    tm: &TraitMatrix,
    model: &DiffusionModel,
    link: &TipLink,
    pass: &PostOrderPass,
    rng: &mut R,
) -> Result<AugmentedState> {
    if pass.stamp() != ParameterStamp::of(model, link) {
        return Err(Error::StaleMessages);
    }
    let q = model.n_traits();
    check_aligned(tree, tm, q)?;
    let n = tree.n_tips();
    let nn = tree.n_nodes();
    // row-major node values, transposed into the matrices at the end
    let mut xs = vec![0.0; nn * q];
    let mut zs = vec![0.0; n * q];
    let root = tree.root();
    let x_root = sample_root(&pass.root, rng)?;
    xs[root * q..(root + 1) * q].copy_from_slice(x_root.as_slice());
    let sampler = TipSampler::new(tm, link, &pass.sigma_inv);
    let mut s = Scratch::new(q);
    let mut x = vec![0.0; q];
    for &k in tree.postorder().iter().rev().skip(1) {
        let pa = tree.parent(k).expect("non-root node has a parent");
        let t = tree.branch_length(k);
        let msg = pass.store.get(k);
        let x_pa = &xs[pa * q..(pa + 1) * q];
        if tree.is_tip(k) {
            sampler.draw(k, &msg, x_pa, t, &mut x, &mut zs[k * q..(k + 1) * q], &mut s, rng)?;
        } else {
            draw_node(&msg, x_pa, t, &sampler.sigma_inv, q, &mut x, &mut s, rng)?;
        }
        xs[k * q..(k + 1) * q].copy_from_slice(&x);
    }
    Ok(AugmentedState {
        node_values: DMatrix::from_row_slice(nn, q, &xs),
        filled_data: DMatrix::from_row_slice(n, q, &zs),
    })
}
