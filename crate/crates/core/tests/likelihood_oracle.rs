mod common;

use common::{random_instance, rel_err};
use phylotrait::likelihood::{log_likelihood, post_order, TipLink};
use phylotrait::oracle::oracle_dense_loglik;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_dense_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 2..=16, 1..=4, 0.0..1.0);
        for link in [TipLink::Degenerate, inst.residual()] {
            let fast = log_likelihood(&inst.tree, &inst.data, &inst.model, &link).unwrap();
            let dense = oracle_dense_loglik(&inst.tree, &inst.data, &inst.model, &link).unwrap();
            prop_assert!(rel_err(fast, dense) < 1e-8, "{} vs {}", fast, dense);
        }
    }

    #[test]
    fn internal_precisions_are_spd_on_their_support(seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 2..=16, 1..=4, 0.0..0.9);
        for link in [TipLink::Degenerate, inst.residual()] {
            let pass = post_order(&inst.tree, &inst.data, &inst.model, &link).unwrap();
            for k in inst.tree.n_tips()..inst.tree.n_nodes() {
                let m = pass.message(k);
                prop_assert!(!m.precision.has_infinite());
                if !m.precision.finite_indices().is_empty() {
                    prop_assert!(common::min_eigenvalue(m.precision.finite_block()) > 0.0);
                }
            }
        }
    }

    #[test]
    fn invariant_to_child_order(seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 2..=40, 1..=4, 0.0..0.8);
        let swapped = inst.tree.with_children_swapped();
        let data = inst.data.align_to(&swapped).unwrap();
        for link in [TipLink::Degenerate, inst.residual()] {
            let a = log_likelihood(&inst.tree, &inst.data, &inst.model, &link).unwrap();
            let b = log_likelihood(&swapped, &data, &inst.model, &link).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn pruning_an_all_missing_tip(seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 4..=30, 1..=4, 0.0..0.5);
        let n = inst.tree.n_tips();
        let root = inst.tree.root();
        let candidates: Vec<usize> = (0..n).filter(|&i| inst.tree.parent(i) != Some(root)).collect();
        prop_assume!(!candidates.is_empty());
        let i = candidates[rng.random_range(0..candidates.len())];
        let q = inst.data.n_traits();
        let mut mask = inst.data.mask().to_vec();
        mask[i * q..(i + 1) * q].iter_mut().for_each(|m| *m = false);
        let data = inst.data.with_mask(mask).unwrap();
        let pruned = inst.tree.prune_tip(inst.tree.tip_label(i)).unwrap();
        let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
        let reduced = phylotrait::traits::TraitMatrix::new(
            keep.iter().map(|&r| data.taxon_names()[r].clone()).collect(),
            data.trait_names().to_vec(),
            keep.iter().map(|&r| (0..q).map(|j| data.value(r, j)).collect()).collect(),
        )
        .unwrap()
        .align_to(&pruned)
        .unwrap();
        for link in [TipLink::Degenerate, inst.residual()] {
            let a = log_likelihood(&inst.tree, &data, &inst.model, &link).unwrap();
            let b = log_likelihood(&pruned, &reduced, &inst.model, &link).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }
}

#[test]
fn all_missing_is_exactly_zero() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    for _ in 0..50 {
        let inst = random_instance(&mut rng, 2..=30, 1..=5, 0.0..0.0);
        let empty = inst.data.with_mask(vec![false; inst.data.mask().len()]).unwrap();
        for link in [TipLink::Degenerate, inst.residual()] {
            assert_eq!(log_likelihood(&inst.tree, &empty, &inst.model, &link).unwrap(), 0.0);
        }
    }
}

#[test]
fn simulated_complete_data_is_finite() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let inst = random_instance(&mut rng, 500..=500, 4..=4, 0.0..0.0);
    for link in [TipLink::Degenerate, inst.residual()] {
        assert!(log_likelihood(&inst.tree, &inst.complete, &inst.model, &link).unwrap().is_finite());
    }
}
