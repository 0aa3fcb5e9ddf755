//! Expected empirical trait covariance and the heritability matrix.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tree::Phylogeny;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeMoments {
    pub n_tips: usize,
    /// tr(Ψ)
    pub trace_psi: f64,
    /// 1ᵀ Ψ 1
    pub total_sum: f64,
    /// Tips below each node.
    pub tip_count: Vec<usize>,
    /// Sum of Ψ entries over the tips below each node, measured from that node.
    pub subtree_sum: Vec<f64>,
    /// Diagonal sum of the same block.
    pub subtree_diag: Vec<f64>,
}

impl TreeMoments {
    /// c_Ψ = tr(Ψ)/N − 1ᵀΨ1/N²
    pub fn c_diffusion(&self) -> f64 {
        let n = self.n_tips as f64;
        self.trace_psi / n - self.total_sum / (n * n)
    }

    /// (N − 1)/N
    pub fn c_residual(&self) -> f64 {
        let n = self.n_tips as f64;
        (n - 1.0) / n
    }
}

/// tr(Ψ) and 1ᵀΨ1 in one post-order pass.
pub fn tree_moments(tree: &Phylogeny) -> TreeMoments {
    let nn = tree.n_nodes();
    let mut tip_count = vec![0usize; nn];
    let mut subtree_sum = vec![0.0; nn];
    let mut subtree_diag = vec![0.0; nn];
    for &k in tree.postorder() {
        match tree.children(k) {
            None => tip_count[k] = 1,
            Some([a, b]) => {
                let (na, nb) = (tip_count[a] as f64, tip_count[b] as f64);
                let (ta, tb) = (tree.branch_length(a), tree.branch_length(b));
                tip_count[k] = tip_count[a] + tip_count[b];
                subtree_sum[k] = subtree_sum[a] + subtree_sum[b] + ta * na * na + tb * nb * nb;
                subtree_diag[k] = subtree_diag[a] + subtree_diag[b] + ta * na + tb * nb;
            }
        }
    }
    let root = tree.root();
    TreeMoments {
        n_tips: tree.n_tips(),
        trace_psi: subtree_diag[root],
        total_sum: subtree_sum[root],
        tip_count,
        subtree_sum,
        subtree_diag,
    }
}

/// V_Z = c_res V_res + c_Ψ Σ.
pub fn expected_empirical_covariance(
    moments: &TreeMoments,
    sigma: &DMatrix<f64>,
    v_res: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if sigma.shape() != v_res.shape() || !sigma.is_square() {
        return Err(Error::DimensionMismatch("sigma and residual variance differ in shape".into()));
    }
    Ok(v_res * moments.c_residual() + sigma * moments.c_diffusion())
}

/// h_jk = c_Ψ Σ_jk / sqrt((c_Ψ Σ_jj + c_res V_jj)(c_Ψ Σ_kk + c_res V_kk)).
pub fn heritability_matrix(
    moments: &TreeMoments,
    sigma: &DMatrix<f64>,
    v_res: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if sigma.shape() != v_res.shape() || !sigma.is_square() {
        return Err(Error::DimensionMismatch("sigma and residual variance differ in shape".into()));
    }
    let (cd, cr) = (moments.c_diffusion(), moments.c_residual());
    let q = sigma.nrows();
    let denom: Vec<f64> = (0..q).map(|j| cd * sigma[(j, j)] + cr * v_res[(j, j)]).collect();
    if let Some(j) = denom.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::InvalidParameter(format!("trait {j} has no variance in either component")));
    }
    Ok(DMatrix::from_fn(q, q, |j, k| cd * sigma[(j, k)] / (denom[j] * denom[k]).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeritabilityStats {
    pub c_diff: f64,
    pub c_res: f64,
    pub expected_cov: DMatrix<f64>,
    pub h_matrix: DMatrix<f64>,
}

impl HeritabilityStats {
    pub fn compute(moments: &TreeMoments, sigma: &DMatrix<f64>, v_res: &DMatrix<f64>) -> Result<Self> {
        Ok(HeritabilityStats {
            c_diff: moments.c_diffusion(),
            c_res: moments.c_residual(),
            expected_cov: expected_empirical_covariance(moments, sigma, v_res)?,
            h_matrix: heritability_matrix(moments, sigma, v_res)?,
        })
    }
}

/// Sample covariance S_Z = (1/N) Σ_i (Z_i − Z̄)(Z_i − Z̄)ᵀ of complete data.
pub fn empirical_covariance(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let mean = z.row_mean();
    let mut c = z.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    (c.transpose() * c) / n
}
