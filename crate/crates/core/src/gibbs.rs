//! Conjugate Wishart updates and the two sweep schedulers.
//!
//! Wishart(rate R, df d) has density ∝ |W|^{(d−q−1)/2} exp(−½ tr(R W)) and
//! mean d R⁻¹. Draws use the Bartlett decomposition of the scale R⁻¹.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augmentation::{sample_augmented, AugmentedState};
use crate::error::{Error, Result};
use crate::likelihood::{check_aligned, post_order, DiffusionModel, LinkKind, ParameterStamp, PostOrderPass, TipLink};
use crate::linalg;
use crate::traits::TraitMatrix;
use crate::tree::{build_psi, Phylogeny};

#[derive(Debug, Clone, PartialEq)]
pub struct WishartPrior {
    rate: DMatrix<f64>,
    df: f64,
}

impl WishartPrior {
    pub fn new(rate: DMatrix<f64>, df: f64) -> Result<Self> {
        let rate = linalg::validate_spd(&rate, "Wishart rate")?;
        let q = rate.nrows();
        if !(df > q as f64 - 1.0) || !df.is_finite() {
            return Err(Error::InvalidParameter(format!("Wishart df {df} must exceed {}", q as f64 - 1.0)));
        }
        Ok(WishartPrior { rate, df })
    }

    /// Identity rate with q + 1 degrees of freedom.
    pub fn default_for(q: usize) -> Self {
        WishartPrior { rate: DMatrix::identity(q, q), df: q as f64 + 1.0 }
    }

    pub fn rate(&self) -> &DMatrix<f64> {
        &self.rate
    }

    pub fn df(&self) -> f64 {
        self.df
    }

    pub fn dim(&self) -> usize {
        self.rate.nrows()
    }
}

pub fn sample_wishart<R: Rng + ?Sized>(rate: &DMatrix<f64>, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let q = rate.nrows();
    if !(df > q as f64 - 1.0) {
        return Err(Error::InvalidParameter(format!("Wishart df {df} must exceed {}", q as f64 - 1.0)));
    }
    let scale = linalg::spd_inverse(rate, "Wishart rate")?;
    let l = linalg::cholesky(&scale, "Wishart scale")?.unpack();
    let mut a = DMatrix::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::InvalidParameter(format!("chi-squared df: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let mut w = &la * la.transpose();
    linalg::symmetrize(&mut w);
    Ok(w)
}

/// Aᵀ (Ψ + J/κ)⁻¹ A in O(N q²) by a scalar-precision post-order pass with a
/// pseudo-branch of length 1/κ above the root.
pub fn tree_weighted_gram(tree: &Phylogeny, kappa: f64, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = tree.n_tips();
    if a.nrows() != n {
        return Err(Error::DimensionMismatch(format!("{} rows for {n} tips", a.nrows())));
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter("root sample size must be positive".into()));
    }
    tree.check_positive_branches()?;
    let q = a.ncols();
    let nn = tree.n_nodes();
    let mut prec = vec![0.0; nn];
    let mut mean = vec![0.0; nn * q];
    let mut g = DMatrix::zeros(q, q);
    let add = |g: &mut DMatrix<f64>, w: f64, v: &[f64]| {
        for c in 0..q {
            for r in 0..q {
                g[(r, c)] += w * v[r] * v[c];
            }
        }
    };
    let root = tree.root();
    for &k in tree.postorder() {
        let p = match tree.children(k) {
            None => {
                for j in 0..q {
                    mean[k * q + j] = a[(k, j)];
                }
                f64::INFINITY
            }
            Some([x, y]) => {
                let (px, py) = (prec[x], prec[y]);
                let pk = px + py;
                for j in 0..q {
                    mean[k * q + j] = (px * mean[x * q + j] + py * mean[y * q + j]) / pk;
                }
                add(&mut g, px, &mean[x * q..(x + 1) * q]);
                add(&mut g, py, &mean[y * q..(y + 1) * q]);
                add(&mut g, -pk, &mean[k * q..(k + 1) * q]);
                pk
            }
        };
        let t = if k == root { 1.0 / kappa } else { tree.branch_length(k) };
        prec[k] = if p.is_infinite() { 1.0 / t } else { 1.0 / (1.0 / p + t) };
    }
    add(&mut g, prec[root], &mean[root * q..(root + 1) * q]);
    linalg::symmetrize(&mut g);
    Ok(g)
}

/// Draws a new Σ from its full conditional given the tip values.
pub fn gibbs_sigma<R: Rng + ?Sized>(
    prior: &WishartPrior,
    aug: &AugmentedState,
    tree: &Phylogeny,
    model: &DiffusionModel,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = tree.n_tips();
    let mu = model.root_mean();
    let resid = DMatrix::from_fn(n, model.n_traits(), |i, j| aug.node_values[(i, j)] - mu[j]);
    let gram = tree_weighted_gram(tree, model.kappa(), &resid)?;
    let w = sample_wishart(&(prior.rate() + gram), prior.df() + n as f64, rng)?;
    linalg::spd_inverse(&w, "sampled diffusion precision")
}

/// Draws a new Γ from its full conditional given imputed data and tip values.
pub fn gibbs_gamma<R: Rng + ?Sized>(
    prior: &WishartPrior,
    aug: &AugmentedState,
    link: &TipLink,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if link.kind() != LinkKind::Residual {
        return Err(Error::InvalidParameter("residual precision update needs the residual link".into()));
    }
    let n = aug.filled_data.nrows();
    let d = &aug.filled_data - aug.node_values.rows(0, n);
    let rate = prior.rate() + d.transpose() * d;
    sample_wishart(&rate, prior.df() + n as f64, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub sigma: WishartPrior,
    pub gamma: WishartPrior,
}

impl Priors {
    pub fn default_for(q: usize) -> Self {
        Priors { sigma: WishartPrior::default_for(q), gamma: WishartPrior::default_for(q) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Joint,
    RandomScan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Augment,
    Sigma,
    Gamma,
}

/// Mutable state of one chain.
#[derive(Debug, Clone)]
pub struct McmcState {
    pub model: DiffusionModel,
    pub link: TipLink,
    pub augmented: AugmentedState,
    pub iteration: u64,
    pub rng: ChaCha20Rng,
    pass: PostOrderPass,
}

impl McmcState {
    /// Σ = Γ = I and one augmentation draw under those values.
    pub fn initialize(
        tree: &Phylogeny,
        tm: &TraitMatrix,
        root_mean: DVector<f64>,
        kappa: f64,
        link: LinkKind,
        mut rng: ChaCha20Rng,
    ) -> Result<Self> {
        let q = tm.n_traits();
        let model = DiffusionModel::new(DMatrix::identity(q, q), root_mean, kappa)?;
        let link = match link {
            LinkKind::Degenerate => TipLink::Degenerate,
            LinkKind::Residual => TipLink::residual(DMatrix::identity(q, q))?,
        };
        let pass = post_order(tree, tm, &model, &link)?;
        let augmented = sample_augmented(tree, tm, &model, &link, &pass, &mut rng)?;
        Ok(McmcState { model, link, augmented, iteration: 0, rng, pass })
    }

    pub fn seeded(
        tree: &Phylogeny,
        tm: &TraitMatrix,
        root_mean: DVector<f64>,
        kappa: f64,
        link: LinkKind,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        McmcState::initialize(tree, tm, root_mean, kappa, link, rng)
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        self.model.sigma()
    }

    pub fn gamma(&self) -> Option<&DMatrix<f64>> {
        self.link.residual_precision()
    }

    fn is_current(&self) -> bool {
        self.pass.stamp() == ParameterStamp::of(&self.model, &self.link)
    }

    /// Recomputes the post-order pass if the parameters moved since the last one.
    pub fn refresh(&mut self, tree: &Phylogeny, tm: &TraitMatrix) -> Result<()> {
        if !self.is_current() {
            self.pass = post_order(tree, tm, &self.model, &self.link)?;
        }
        Ok(())
    }

    /// Observed-data log-likelihood at the current parameters.
    pub fn log_likelihood(&mut self, tree: &Phylogeny, tm: &TraitMatrix) -> Result<f64> {
        self.refresh(tree, tm)?;
        Ok(self.pass.log_likelihood)
    }

    fn update_sigma(&mut self, tree: &Phylogeny, priors: &Priors) -> Result<()> {
        let sigma = gibbs_sigma(&priors.sigma, &self.augmented, tree, &self.model, &mut self.rng)?;
        self.model = self.model.with_sigma(sigma)?;
        debug_assert!(self.model.sigma().clone().cholesky().is_some());
        Ok(())
    }

    fn update_gamma(&mut self, priors: &Priors) -> Result<()> {
        if self.link.kind() == LinkKind::Residual {
            let gamma = gibbs_gamma(&priors.gamma, &self.augmented, &self.link, &mut self.rng)?;
            self.link = TipLink::residual(gamma)?;
        }
        Ok(())
    }
}

fn check_priors(priors: &Priors, q: usize) -> Result<()> {
    if priors.sigma.dim() != q || priors.gamma.dim() != q {
        return Err(Error::DimensionMismatch(format!("priors must be {q}x{q}")));
    }
    Ok(())
}

/// One sweep of the analytic sampler: joint draw of node values and missing
/// cells, then Σ and Γ from the same draw. The post-order pass for the new
/// parameters is computed at the end of the sweep and reused by the next one.
pub fn mcmc_step(
    state: &mut McmcState,
    tree: &Phylogeny,
    tm: &TraitMatrix,
    priors: &Priors,
    schedule: Schedule,
) -> Result<()> {
    check_priors(priors, tm.n_traits())?;
    let mut blocks = vec![Block::Augment, Block::Sigma];
    if state.link.kind() == LinkKind::Residual {
        blocks.push(Block::Gamma);
    }
    if schedule == Schedule::RandomScan {
        blocks.shuffle(&mut state.rng);
    }
    for block in blocks {
        match block {
            Block::Augment => {
                state.refresh(tree, tm)?;
                state.augmented =
                    sample_augmented(tree, tm, &state.model, &state.link, &state.pass, &mut state.rng)?;
            }
            Block::Sigma => state.update_sigma(tree, priors)?,
            Block::Gamma => state.update_gamma(priors)?,
        }
    }
    state.refresh(tree, tm)?;
    state.iteration += 1;
    Ok(())
}

/// Tip-by-tip Gibbs sampler used as the efficiency baseline. Each tip's
/// unknowns are drawn given every other tip through the dense precision
/// K = Ψ̃⁻¹, which is factored once for the fixed tree.
#[derive(Debug, Clone)]
pub struct BaselineSampler {
    k: DMatrix<f64>,
    kappa: f64,
}

impl BaselineSampler {
    pub fn new(tree: &Phylogeny, kappa: f64) -> Result<Self> {
        let psi = build_psi(tree, kappa).psi_tilde;
        let k = linalg::spd_inverse(&psi, "tree covariance")?;
        Ok(BaselineSampler { k, kappa })
    }
}

pub fn baseline_tipwise_sampler(
    state: &mut McmcState,
    sampler: &BaselineSampler,
    tree: &Phylogeny,
    tm: &TraitMatrix,
    priors: &Priors,
) -> Result<()> {
    let q = tm.n_traits();
    let n = tm.n_taxa();
    check_aligned(tree, tm, q)?;
    check_priors(priors, q)?;
    if (sampler.kappa - state.model.kappa()).abs() > 0.0 || sampler.k.nrows() != n {
        return Err(Error::InvalidParameter("baseline cache built for a different tree or root prior".into()));
    }
    let mu = state.model.root_mean().clone();
    let sigma_inv = linalg::spd_inverse(state.model.sigma(), "sigma")?;
    let residual = match &state.link {
        TipLink::Degenerate => None,
        TipLink::Residual { precision } => Some((precision.clone(), linalg::spd_inverse(precision, "gamma")?)),
    };
    let mut e = DMatrix::from_fn(n, q, |i, j| state.augmented.node_values[(i, j)] - mu[j]);
    for i in 0..n {
        let obs = tm.observed_indices(i);
        let mis = tm.missing_indices(i);
        if residual.is_none() && mis.is_empty() {
            continue;
        }
        let kii = sampler.k[(i, i)];
        let mut s = DVector::zeros(q);
        for r in 0..n {
            let w = sampler.k[(i, r)];
            if r != i && w != 0.0 {
                for j in 0..q {
                    s[j] += w * e[(r, j)];
                }
            }
        }
        // X_i | X_-i ~ MVN(μ₀ − s / K_ii, Σ / K_ii)
        let prior_mean = &mu - s / kii;
        let prior_prec = &sigma_inv * kii;
        let z = DVector::from_fn(q, |j, _| if tm.is_observed(i, j) { tm.values()[(i, j)] } else { 0.0 });
        let (x, zrow) = match &residual {
            None => {
                let mut x = z.clone();
                let p_mm = linalg::submatrix(&prior_prec, &mis, &mis);
                let p_mo = linalg::submatrix(&prior_prec, &mis, &obs);
                let d_o = DVector::from_fn(obs.len(), |a, _| prior_mean[obs[a]] - z[obs[a]]);
                let ch = linalg::cholesky(&p_mm, "tip conditional precision")?;
                let shift = ch.solve(&(p_mo * d_o));
                let mean = DVector::from_fn(mis.len(), |a, _| prior_mean[mis[a]] + shift[a]);
                let xm = linalg::sample_mvn_precision_chol(&mean, &ch, &mut state.rng);
                for (a, &j) in mis.iter().enumerate() {
                    x[j] = xm[a];
                }
                (x.clone(), x)
            }
            Some((gamma, v_res)) => {
                let mut prec = prior_prec.clone();
                let mut rhs = &prior_prec * &prior_mean;
                if !obs.is_empty() {
                    let p_obs = if mis.is_empty() {
                        gamma.clone()
                    } else {
                        linalg::spd_inverse(&linalg::submatrix(v_res, &obs, &obs), "residual variance block")?
                    };
                    for (a, &j) in obs.iter().enumerate() {
                        for (b, &l) in obs.iter().enumerate() {
                            prec[(j, l)] += p_obs[(a, b)];
                            rhs[j] += p_obs[(a, b)] * z[l];
                        }
                    }
                }
                let ch = linalg::cholesky(&prec, "tip conditional precision")?;
                let mean = ch.solve(&rhs);
                let x = linalg::sample_mvn_precision_chol(&mean, &ch, &mut state.rng);
                let mut zrow = z.clone();
                if !mis.is_empty() {
                    let g_mm = linalg::submatrix(gamma, &mis, &mis);
                    let g_mo = linalg::submatrix(gamma, &mis, &obs);
                    let d_o = DVector::from_fn(obs.len(), |a, _| x[obs[a]] - z[obs[a]]);
                    let chg = linalg::cholesky(&g_mm, "residual precision block")?;
                    let shift = chg.solve(&(g_mo * d_o));
                    let mean = DVector::from_fn(mis.len(), |a, _| x[mis[a]] + shift[a]);
                    let zm = linalg::sample_mvn_precision_chol(&mean, &chg, &mut state.rng);
                    for (a, &j) in mis.iter().enumerate() {
                        zrow[j] = zm[a];
                    }
                }
                (x, zrow)
            }
        };
        for j in 0..q {
            state.augmented.node_values[(i, j)] = x[j];
            state.augmented.filled_data[(i, j)] = zrow[j];
            e[(i, j)] = x[j] - mu[j];
        }
    }
    state.update_sigma(tree, priors)?;
    state.update_gamma(priors)?;
    state.iteration += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_gram, oracle_dense_gram};
    use crate::tree::parse_newick;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gram_examples() {
        let tree = parse_newick("(A:1,B:1);").unwrap();
        let a = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let g = tree_weighted_gram(&tree, 1.0, &a).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 2.0, epsilon = 1e-14);
        assert_eq!(tree_weighted_gram(&tree, 1.0, &DMatrix::zeros(2, 3)).unwrap(), DMatrix::zeros(3, 3));
        let dense = oracle_dense_gram(&tree, 1.0, &a).unwrap();
        assert_abs_diff_eq!(dense[(0, 0)], 2.0, epsilon = 1e-14);
        let one = dense_gram(&DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_abs_diff_eq!(one[(0, 0)], 4.5, epsilon = 1e-14);
    }

    #[test]
    fn gram_matches_dense_on_fig1() {
        let tree = parse_newick("((A:1,B:1):2,C:3);").unwrap();
        let a = DMatrix::from_row_slice(3, 2, &[0.3, -1.0, 2.0, 0.5, -0.7, 1.1]);
        let fast = tree_weighted_gram(&tree, 0.5, &a).unwrap();
        let slow = oracle_dense_gram(&tree, 0.5, &a).unwrap();
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
    }

    #[test]
    fn wishart_mean() {
        let rate = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let df = 5.5;
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let n = 50_000;
        let mut s = DMatrix::zeros(2, 2);
        for _ in 0..n {
            s += sample_wishart(&rate, df, &mut rng).unwrap();
        }
        let expected = linalg::spd_inverse(&rate, "r").unwrap() * df;
        assert!(((s / n as f64) - expected).amax() < 0.03);
    }

    #[test]
    fn gamma_scalar_square() {
        let aug = AugmentedState {
            node_values: DMatrix::from_element(1, 1, 1.0),
            filled_data: DMatrix::from_element(1, 1, 4.0),
        };
        let prior = WishartPrior::default_for(1);
        let link = TipLink::residual(DMatrix::identity(1, 1)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let n = 40_000;
        let mean: f64 =
            (0..n).map(|_| gibbs_gamma(&prior, &aug, &link, &mut rng).unwrap()[(0, 0)]).sum::<f64>() / n as f64;
        // Wishart(rate 1 + 9, df 2 + 1) has mean 3/10
        assert!((mean - 0.3).abs() < 0.01);
        assert!(gibbs_gamma(&prior, &aug, &TipLink::Degenerate, &mut rng).is_err());
    }

    #[test]
    fn prior_validation() {
        assert!(WishartPrior::new(DMatrix::identity(2, 2), 1.0).is_err());
        assert!(WishartPrior::new(DMatrix::identity(2, 2), 1.5).is_ok());
    }
}
