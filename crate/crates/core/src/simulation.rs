//! Forward simulation of trait data and missing-at-random masks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1};

use crate::augmentation::AugmentedState;
use crate::error::{Error, Result};
use crate::likelihood::{DiffusionModel, TipLink};
use crate::linalg;
use crate::traits::TraitMatrix;
use crate::tree::Phylogeny;

/// Random topology built by merging uniformly chosen pairs of lineages, with
/// i.i.d. Exp(1) branch lengths. Tips are labelled `t1..tN`.
pub fn random_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Phylogeny> {
    if n < 2 {
        return Err(Error::TooFewTips(n));
    }
    let labels = (1..=n).map(|i| format!("t{i}")).collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut children = Vec::with_capacity(n - 1);
    for j in 0..n - 1 {
        let a = active.swap_remove(rng.random_range(0..active.len()));
        let b = active.swap_remove(rng.random_range(0..active.len()));
        children.push([a, b]);
        active.push(n + j);
    }
    let lengths = (0..2 * n - 1)
        .map(|k| {
            if k == 2 * n - 2 {
                return 0.0;
            }
            let t: f64 = Exp1.sample(rng);
            t.max(f64::MIN_POSITIVE)
        })
        .collect();
    Phylogeny::from_children(labels, children, lengths)
}

#[derive(Debug, Clone)]
pub enum TreeSource {
    Given(Phylogeny),
    Random { n_tips: usize },
}

#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub tree: TreeSource,
    pub model: DiffusionModel,
    pub link: TipLink,
    pub trait_names: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub tree: Phylogeny,
    pub data: TraitMatrix,
    pub truth: AugmentedState,
}

/// Draws X_root ~ MVN(μ₀, Σ/κ), X_child ~ MVN(X_parent, tΣ), then Z_i per link.
pub fn simulate_on<R: Rng + ?Sized>(
    tree: &Phylogeny,
    model: &DiffusionModel,
    link: &TipLink,
    trait_names: &[String],
    rng: &mut R,
) -> Result<(TraitMatrix, AugmentedState)> {
    let q = model.n_traits();
    if trait_names.len() != q {
        return Err(Error::DimensionMismatch(format!("{} trait names for {q} traits", trait_names.len())));
    }
    let sigma_chol = linalg::cholesky(model.sigma(), "sigma")?.unpack();
    let gamma_chol = match link {
        TipLink::Degenerate => None,
        TipLink::Residual { precision } => Some(linalg::cholesky(precision, "residual precision")?),
    };
    let mut x = DMatrix::zeros(tree.n_nodes(), q);
    let root = tree.root();
    let z0 = linalg::standard_normal_vector(q, rng);
    let root_val = model.root_mean() + &sigma_chol * z0 / model.kappa().sqrt();
    x.row_mut(root).copy_from(&root_val.transpose());
    for &k in tree.postorder().iter().rev().skip(1) {
        let pa = tree.parent(k).expect("non-root node has a parent");
        let step = &sigma_chol * linalg::standard_normal_vector(q, rng) * tree.branch_length(k).sqrt();
        let v = x.row(pa).transpose() + step;
        x.row_mut(k).copy_from(&v.transpose());
    }
    let n = tree.n_tips();
    let mut z = x.rows(0, n).into_owned();
    if let Some(ch) = &gamma_chol {
        for i in 0..n {
            let mean = x.row(i).transpose();
            let e = linalg::sample_mvn_precision_chol(&DVector::zeros(q), ch, rng);
            z.row_mut(i).copy_from(&(mean + e).transpose());
        }
    }
    let data = TraitMatrix::from_dense(tree.tip_labels().to_vec(), trait_names.to_vec(), &z, vec![true; n * q])?;
    Ok((data, AugmentedState { node_values: x, filled_data: z }))
}

pub fn simulate_traits(spec: &SimulationSpec) -> Result<Simulated> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let tree = match &spec.tree {
        TreeSource::Given(t) => t.clone(),
        TreeSource::Random { n_tips } => random_tree(*n_tips, &mut rng)?,
    };
    let (data, truth) = simulate_on(&tree, &spec.model, &spec.link, &spec.trait_names, &mut rng)?;
    Ok(Simulated { tree, data, truth })
}

/// Masks each cell independently with its trait's probability.
pub fn apply_mar_mask(tm: &TraitMatrix, rates: &[f64], seed: u64) -> Result<TraitMatrix> {
    let (n, q) = (tm.n_taxa(), tm.n_traits());
    if rates.len() != q {
        return Err(Error::DimensionMismatch(format!("{} rates for {q} traits", rates.len())));
    }
    if let Some(r) = rates.iter().find(|r| !(**r >= 0.0 && **r < 1.0)) {
        return Err(Error::InvalidParameter(format!("missingness rate {r} must lie in [0, 1)")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut mask = tm.mask().to_vec();
    for i in 0..n {
        for j in 0..q {
            let hide = rng.random::<f64>() < rates[j];
            if hide {
                mask[i * q + j] = false;
            }
        }
    }
    tm.with_mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(q: usize) -> Vec<String> {
        (0..q).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn random_tree_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let t = random_tree(50, &mut rng).unwrap();
        assert_eq!(t.n_tips(), 50);
        assert!(t.check_positive_branches().is_ok());
        assert_eq!(t.tip_label(0), "t1");
        assert!(random_tree(1, &mut rng).is_err());
    }

    #[test]
    fn mask_rates() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let tree = random_tree(2500, &mut rng).unwrap();
        let model = DiffusionModel::new(DMatrix::identity(4, 4), DVector::zeros(4), 1.0).unwrap();
        let (data, _) = simulate_on(&tree, &model, &TipLink::Degenerate, &names(4), &mut rng).unwrap();
        assert_eq!(apply_mar_mask(&data, &[0.0; 4], 3).unwrap(), data);
        assert!(apply_mar_mask(&data, &[1.0, 0.0, 0.0, 0.0], 3).is_err());
        let masked = apply_mar_mask(&data, &[0.3; 4], 3).unwrap();
        assert!((masked.missing_fraction() - 0.3).abs() < 0.02);
        assert_eq!(masked, apply_mar_mask(&data, &[0.3; 4], 3).unwrap());
    }

    #[test]
    fn seeded_simulation_repeats() {
        let model = DiffusionModel::new(DMatrix::identity(2, 2), DVector::zeros(2), 1.0).unwrap();
        let spec = SimulationSpec {
            tree: TreeSource::Random { n_tips: 10 },
            model,
            link: TipLink::residual(DMatrix::identity(2, 2)).unwrap(),
            trait_names: names(2),
            seed: 8,
        };
        let a = simulate_traits(&spec).unwrap();
        let b = simulate_traits(&spec).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
        assert_ne!(a.truth.filled_data, a.truth.tip_values());
    }
}
