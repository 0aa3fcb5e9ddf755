mod common;

use nalgebra::{DMatrix, DVector};
use phylotrait::likelihood::{log_likelihood, DiffusionModel, TipLink};
use phylotrait::oracle::oracle_dense_loglik;
use phylotrait::simulation::{apply_mar_mask, simulate_on, simulate_traits, SimulationSpec, TreeSource};
use phylotrait::tree::{build_psi, parse_newick, Phylogeny};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn tip_covariance_is_tree_covariance() {
    let tree = parse_newick("((A:0.5,B:1):0.7,(C:0.2,D:0.4):1.3);").unwrap();
    let kappa = 2.0;
    let model = DiffusionModel::new(DMatrix::identity(1, 1), DVector::zeros(1), kappa).unwrap();
    let target = build_psi(&tree, kappa).psi_tilde;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let reps = 10_000;
    let mut tips = vec![Vec::with_capacity(reps); 4];
    for _ in 0..reps {
        let (d, _) = simulate_on(&tree, &model, &TipLink::Degenerate, &common::names(1), &mut rng).unwrap();
        for (i, t) in tips.iter_mut().enumerate() {
            t.push(d.values()[(i, 0)]);
        }
    }
    for i in 0..4 {
        for j in i..4 {
            // known zero mean: raw second moments
            let prods: Vec<f64> = tips[i].iter().zip(&tips[j]).map(|(a, b)| a * b).collect();
            let (m, se) = common::mean_se(&prods);
            assert!((m - target[(i, j)]).abs() < 4.0 * se, "({i},{j}) {m} vs {}", target[(i, j)]);
        }
    }
}

#[test]
fn zero_branches_and_huge_kappa_pin_tips_to_root_mean() {
    let tree = Phylogeny::from_children(
        vec!["a".into(), "b".into(), "c".into()],
        vec![[0, 1], [3, 2]],
        vec![0.0; 5],
    )
    .unwrap();
    let mu = DVector::from_vec(vec![1.5, -2.0]);
    let model = DiffusionModel::new(DMatrix::identity(2, 2), mu.clone(), 1e8).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (d, _) = simulate_on(&tree, &model, &TipLink::Degenerate, &common::names(2), &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((d.values()[(i, j)] - mu[j]).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn residual_noise_is_centered_and_independent() {
    let tree = parse_newick("((A:1,B:1):1,C:2);").unwrap();
    let model = DiffusionModel::new(DMatrix::identity(1, 1), DVector::zeros(1), 1.0).unwrap();
    let link = TipLink::residual(DMatrix::from_element(1, 1, 2.0)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let (mut x, mut e) = (Vec::new(), Vec::new());
    for _ in 0..20_000 {
        let (d, truth) = simulate_on(&tree, &model, &link, &common::names(1), &mut rng).unwrap();
        x.push(truth.node_values[(0, 0)]);
        e.push(d.values()[(0, 0)] - truth.node_values[(0, 0)]);
    }
    let (m, se) = common::mean_se(&e);
    assert!(m.abs() < 4.0 * se);
    let (c, se) = common::cov_se(&x, &e);
    assert!(c.abs() < 4.0 * se);
}

#[test]
fn masked_simulations_match_oracle() {
    for seed in 0..20 {
        let model = DiffusionModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 0.5]),
            DVector::from_vec(vec![0.0, 3.0]),
            0.2,
        )
        .unwrap();
        let spec = SimulationSpec {
            tree: TreeSource::Random { n_tips: 15 },
            model: model.clone(),
            link: TipLink::Degenerate,
            trait_names: common::names(2),
            seed,
        };
        let sim = simulate_traits(&spec).unwrap();
        let masked = apply_mar_mask(&sim.data, &[0.4, 0.2], seed).unwrap();
        let link = TipLink::residual(DMatrix::identity(2, 2) * 3.0).unwrap();
        for l in [TipLink::Degenerate, link] {
            let a = log_likelihood(&sim.tree, &masked, &model, &l).unwrap();
            let b = oracle_dense_loglik(&sim.tree, &masked, &model, &l).unwrap();
            assert!(common::rel_err(a, b) < 1e-8);
        }
    }
}
