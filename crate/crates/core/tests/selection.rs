mod common;

use dstc::select::{select_all, BinaryMatrix, PassMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_select, check_invariants, random_matrix};

#[test]
fn matches_exhaustive_search_on_every_small_matrix() {
    for n in 1..=3usize {
        for mask in 0u32..(1 << (n * n)) {
            let rows: Vec<Vec<u8>> = (0..n)
                .map(|j| (0..n).map(|k| ((mask >> (j * n + k)) & 1) as u8).collect())
                .collect();
            let m = BinaryMatrix::from_rows(&rows);
            assert_eq!(select_all(&m), brute_force_select(&rows), "{rows:?}");
        }
    }
}

#[test]
fn matches_exhaustive_search_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 4..=8 {
        for _ in 0..500 {
            let m = random_matrix(n, &mut rng);
            assert_eq!(select_all(&m), brute_force_select(&m.to_rows()));
        }
    }
}

fn permute(m: &BinaryMatrix, codes: &[usize], tests: &[usize]) -> BinaryMatrix {
    let n = m.size();
    let mut out = BinaryMatrix::zeros(n);
    for (j, &cj) in codes.iter().enumerate() {
        for (k, &tk) in tests.iter().enumerate() {
            out.set(cj, tk, m.passes(j, k));
        }
    }
    out
}

proptest! {
    #[test]
    fn invariants_hold(rows in (1usize..7).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0u8..2, n), n))) {
        let m = BinaryMatrix::from_rows(&rows);
        let sel = select_all(&m);
        prop_assert!(check_invariants(&m, &sel).is_ok());
    }

    // Relabeling codes and tests leaves the optimal sums unchanged. k' is
    // excluded: it depends on which of several tied j' is picked.
    #[test]
    fn permutation_preserves_selected_sums(
        (rows, codes, tests) in (1usize..7).prop_flat_map(|n| (
            prop::collection::vec(prop::collection::vec(0u8..2, n), n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let m = BinaryMatrix::from_rows(&rows);
        let p = permute(&m, &codes, &tests);
        let a = select_all(&m);
        let b = select_all(&p);
        prop_assert_eq!(a.j_prime.map(|j| m.row_sum(j)), b.j_prime.map(|j| p.row_sum(j)));
        prop_assert_eq!(a.k_prime.is_some(), b.k_prime.is_some());
        prop_assert_eq!(a.k_dagger.map(|k| m.col_sum(k)), b.k_dagger.map(|k| p.col_sum(k)));
        prop_assert_eq!(a.j_dagger.is_some(), b.j_dagger.is_some());
    }
}

#[test]
fn all_pass_and_all_fail() {
    let sel = select_all(&BinaryMatrix::ones(4));
    assert_eq!((sel.j_prime, sel.k_prime, sel.k_dagger, sel.j_dagger), (Some(0), Some(0), None, None));
    let sel = select_all(&BinaryMatrix::zeros(4));
    assert_eq!((sel.j_prime, sel.k_prime, sel.k_dagger, sel.j_dagger), (Some(0), None, Some(0), Some(0)));
}
