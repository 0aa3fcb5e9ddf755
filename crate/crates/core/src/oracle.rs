//! Dense brute-force references for the tree recursions.
//!
//! Everything here builds the full joint covariance and works with
//! ordinary Gaussian algebra; the cost is cubic in N·q. The vectorization
//! is trait-major: coordinate `j * N + i` holds trait `j` of taxon `i`,
//! matching the Σ ⊗ Ψ̃ Kronecker ordering.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{DiffusionModel, TipLink};
use crate::linalg::{self, LN_2PI};
use crate::traits::TraitMatrix;
use crate::tree::{build_psi, NodeId, Phylogeny};

pub const SIZE_LIMIT: usize = 4096;

fn guard(size: usize) -> Result<()> {
    if size > SIZE_LIMIT {
        return Err(Error::SizeGuard { size, limit: SIZE_LIMIT });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DenseJointModel {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n_taxa: usize,
}

impl DenseJointModel {
    pub fn index(&self, taxon: usize, trait_: usize) -> usize {
        trait_ * self.n_taxa + taxon
    }
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// vec(Z) ~ MVN(vec(1 μ₀ᵀ), Σ ⊗ Ψ̃ [+ Γ⁻¹ ⊗ I]).
pub fn dense_joint(tree: &Phylogeny, model: &DiffusionModel, link: &TipLink) -> Result<DenseJointModel> {
    let n = tree.n_tips();
    let q = model.n_traits();
    guard(n * q)?;
    let psi = build_psi(tree, model.kappa());
    let mut covariance = kronecker(model.sigma(), &psi.psi_tilde);
    if let TipLink::Residual { precision } = link {
        let v = linalg::spd_inverse(precision, "residual precision")?;
        covariance += kronecker(&v, &DMatrix::identity(n, n));
    }
    let mean = DVector::from_fn(n * q, |r, _| model.root_mean()[r / n]);
    Ok(DenseJointModel { mean, covariance, n_taxa: n })
}

/// Observed-data log-likelihood by deleting missing coordinates of the dense joint.
pub fn oracle_dense_loglik(
    tree: &Phylogeny,
    tm: &TraitMatrix,
    model: &DiffusionModel,
    link: &TipLink,
) -> Result<f64> {
    let joint = dense_joint(tree, model, link)?;
    let (n, q) = (tm.n_taxa(), tm.n_traits());
    let mut keep = Vec::new();
    let mut z = Vec::new();
    for j in 0..q {
        for i in 0..n {
            if let Some(v) = tm.value(i, j) {
                keep.push(joint.index(i, j));
                z.push(v);
            }
        }
    }
    if keep.is_empty() {
        return Ok(0.0);
    }
    let cov = linalg::submatrix(&joint.covariance, &keep, &keep);
    let mean = linalg::subvector(&joint.mean, &keep);
    linalg::mvn_log_density(&DVector::from_vec(z), &mean, &cov)
}

/// Complete-data matrix-normal log-density in row/column form:
/// −(Nq/2)log 2π − (q/2)log|Ψ̃| − (N/2)log|Σ| − ½ tr(Σ⁻¹ (Z−M)ᵀ Ψ̃⁻¹ (Z−M)).
pub fn matrix_normal_loglik(tree: &Phylogeny, tm: &TraitMatrix, model: &DiffusionModel) -> Result<f64> {
    let (n, q) = (tm.n_taxa(), tm.n_traits());
    guard(n * q)?;
    if tm.n_observed() != n * q {
        return Err(Error::InvalidParameter("matrix-normal form needs complete data".into()));
    }
    let psi = build_psi(tree, model.kappa()).psi_tilde;
    let resid = DMatrix::from_fn(n, q, |i, j| tm.values()[(i, j)] - model.root_mean()[j]);
    let psi_ch = linalg::cholesky(&psi, "psi tilde")?;
    let sigma_ch = linalg::cholesky(model.sigma(), "sigma")?;
    let w = psi_ch.solve(&resid);
    let inner = resid.transpose() * w;
    let trace = sigma_ch.solve(&inner).trace();
    Ok(-0.5 * (n * q) as f64 * LN_2PI
        - 0.5 * q as f64 * linalg::chol_log_det(&psi_ch)
        - 0.5 * n as f64 * linalg::chol_log_det(&sigma_ch)
        - 0.5 * trace)
}

/// A scalar random variable in the extended joint over node values and data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Latent trait value at any node.
    Node { node: NodeId, trait_: usize },
    /// Data cell at a tip (differs from the tip node value under a residual link).
    Datum { taxon: NodeId, trait_: usize },
}

/// Exact conditional mean and covariance of `targets` given all observed cells.
pub fn oracle_dense_conditional(
    tree: &Phylogeny,
    tm: &TraitMatrix,
    model: &DiffusionModel,
    link: &TipLink,
    targets: &[Target],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, q) = (tm.n_taxa(), tm.n_traits());
    guard(n * q)?;
    guard(targets.len() + tm.n_observed())?;
    let kappa = model.kappa();
    let sigma = model.sigma();
    let v_res = match link {
        TipLink::Degenerate => None,
        TipLink::Residual { precision } => Some(linalg::spd_inverse(precision, "residual precision")?),
    };
    let depth = tree.depths();
    let nn = tree.n_nodes();
    let mut shared = DMatrix::zeros(nn, nn);
    for a in 0..nn {
        for b in a..nn {
            let d = depth[tree.mrca(a, b)] + 1.0 / kappa;
            shared[(a, b)] = d;
            shared[(b, a)] = d;
        }
    }
    // (node, trait, is data cell)
    let var = |t: &Target| match *t {
        Target::Node { node, trait_ } => (node, trait_, false),
        Target::Datum { taxon, trait_ } => (taxon, trait_, true),
    };
    let cov = |x: &Target, y: &Target| {
        let (a, j, da) = var(x);
        let (b, k, db) = var(y);
        let mut c = sigma[(j, k)] * shared[(a, b)];
        if let (true, true, Some(v)) = (da, db, &v_res) {
            if a == b {
                c += v[(j, k)];
            }
        }
        c
    };
    let observed: Vec<Target> = (0..n)
        .flat_map(|i| (0..q).map(move |j| (i, j)))
        .filter(|&(i, j)| tm.is_observed(i, j))
        .map(|(i, j)| Target::Datum { taxon: i, trait_: j })
        .collect();
    let mu = |t: &Target| model.root_mean()[var(t).1];
    let prior_mean = DVector::from_fn(targets.len(), |r, _| mu(&targets[r]));
    let c_tt = DMatrix::from_fn(targets.len(), targets.len(), |r, s| cov(&targets[r], &targets[s]));
    if observed.is_empty() {
        return Ok((prior_mean, c_tt));
    }
    let c_oo = DMatrix::from_fn(observed.len(), observed.len(), |r, s| cov(&observed[r], &observed[s]));
    let c_to = DMatrix::from_fn(targets.len(), observed.len(), |r, s| cov(&targets[r], &observed[s]));
    let resid = DVector::from_fn(observed.len(), |r, _| {
        let (i, j, _) = var(&observed[r]);
        tm.values()[(i, j)] - mu(&observed[r])
    });
    let ch = linalg::cholesky(&c_oo, "observed covariance")?;
    let mean = prior_mean + &c_to * ch.solve(&resid);
    let mut cov_post = c_tt - &c_to * ch.solve(&c_to.transpose());
    linalg::symmetrize(&mut cov_post);
    Ok((mean, cov_post))
}

/// Aᵀ Ψ̃⁻¹ A from an explicit Ψ̃.
pub fn dense_gram(psi_tilde: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = linalg::cholesky(psi_tilde, "psi tilde")?;
    let mut g = a.transpose() * ch.solve(a);
    linalg::symmetrize(&mut g);
    Ok(g)
}

pub fn oracle_dense_gram(tree: &Phylogeny, kappa: f64, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    guard(tree.n_tips() * a.ncols())?;
    dense_gram(&build_psi(tree, kappa).psi_tilde, a)
}
