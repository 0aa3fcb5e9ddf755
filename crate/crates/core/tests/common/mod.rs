#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use phylotrait::likelihood::{DiffusionModel, TipLink};
use phylotrait::simulation::{apply_mar_mask, random_tree, simulate_on};
use phylotrait::traits::TraitMatrix;
use phylotrait::tree::Phylogeny;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub fn names(q: usize) -> Vec<String> {
    (0..q).map(|j| format!("x{j}")).collect()
}

/// A Aᵀ + εI with A uniform on [−1, 1].
pub fn random_spd<R: Rng>(q: usize, ridge: f64, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(q, q) * ridge
}

pub struct Instance {
    pub tree: Phylogeny,
    pub complete: TraitMatrix,
    pub data: TraitMatrix,
    pub model: DiffusionModel,
    pub gamma: DMatrix<f64>,
}

impl Instance {
    pub fn residual(&self) -> TipLink {
        TipLink::residual(self.gamma.clone()).unwrap()
    }
}

/// Random tree, SPD Σ and Γ, data simulated under the residual link with a
/// per-cell missingness rate drawn uniformly from `rates`.
pub fn random_instance(
    rng: &mut ChaCha20Rng,
    n_range: std::ops::RangeInclusive<usize>,
    q_range: std::ops::RangeInclusive<usize>,
    rates: std::ops::Range<f64>,
) -> Instance {
    let n = rng.random_range(n_range);
    let q = rng.random_range(q_range);
    let tree = random_tree(n, rng).unwrap();
    let sigma = random_spd(q, 0.3, rng);
    let mu = DVector::from_fn(q, |_, _| rng.random_range(-2.0..2.0));
    let kappa = rng.random_range(0.05..2.0);
    let model = DiffusionModel::new(sigma, mu, kappa).unwrap();
    let gamma = random_spd(q, 0.5, rng);
    let link = TipLink::residual(gamma.clone()).unwrap();
    let (complete, _) = simulate_on(&tree, &model, &link, &names(q), rng).unwrap();
    let rate = if rates.is_empty() { rates.start } else { rng.random_range(rates) };
    let data = apply_mar_mask(&complete, &vec![rate.min(0.999_999); q], rng.random()).unwrap();
    Instance { tree, complete, data, model, gamma }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Mean and standard error of the mean for i.i.d. draws.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Sample covariance of two series and its standard error, from the
/// variance of the centered products.
pub fn cov_se(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, _) = mean_se(x);
    let (my, _) = mean_se(y);
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    mean_se(&prods)
}
