mod common;

use common::{brute_majority, brute_mutual_information, conv1d_oracle, events_from_counts};
use lewisgame::analysis::{entropy_bits, majority_symbols, mutual_information_bits, ContingencyTable};
use lewisgame::autodiff::{log_softmax, softmax, Tape, Tensor};
use lewisgame::data::{read_table, write_table_to, CellRecord, Dataset, TableSchema};
use proptest::prelude::*;

fn classes(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("c{c}")).collect()
}

fn table_strategy() -> impl Strategy<Value = (usize, usize, Vec<u64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(k, v)| {
        (Just(k), Just(v), prop::collection::vec(0u64..20, k * v))
    })
}

fn table(k: usize, v: usize, counts: Vec<u64>) -> ContingencyTable {
    ContingencyTable::from_counts(classes(k), v, counts).unwrap()
}

fn rows(k: usize, v: usize, counts: &[u64]) -> Vec<Vec<u64>> {
    (0..k).map(|c| counts[c * v..(c + 1) * v].to_vec()).collect()
}

proptest! {
    #[test]
    fn mi_is_bounded_by_marginal_entropies((k, v, counts) in table_strategy()) {
        let t = table(k, v, counts);
        let mi = mutual_information_bits(&t);
        let hc = entropy_bits(&t.row_sums());
        let hs = entropy_bits(&t.column_sums());
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= hc.min(hs) + 1e-12);
        prop_assert!(mi <= (k.min(v) as f64).log2() + 1e-12);
    }

    #[test]
    fn mi_matches_entropy_decomposition((k, v, counts) in table_strategy()) {
        let events = events_from_counts(&rows(k, v, &counts));
        let mi = mutual_information_bits(&table(k, v, counts));
        prop_assert!((mi - brute_mutual_information(&events)).abs() < 1e-12);
    }

    #[test]
    fn mi_is_invariant_under_row_and_column_permutations(
        (k, v, counts) in table_strategy(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut row_perm: Vec<usize> = (0..k).collect();
        let mut col_perm: Vec<usize> = (0..v).collect();
        row_perm.shuffle(&mut rng);
        col_perm.shuffle(&mut rng);
        let permuted: Vec<u64> = (0..k)
            .flat_map(|c| col_perm.iter().map(move |&s| (c, s)))
            .map(|(c, s)| counts[row_perm[c] * v + s])
            .collect();
        let a = mutual_information_bits(&table(k, v, counts));
        let b = mutual_information_bits(&table(k, v, permuted));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn majority_purity_is_invariant_under_symbol_relabeling(
        (k, v, counts) in table_strategy(),
        shift in 0usize..8,
    ) {
        prop_assume!(rows(k, v, &counts).iter().all(|r| r.iter().sum::<u64>() > 0));
        let relabeled: Vec<u64> = (0..k)
            .flat_map(|c| (0..v).map(move |s| (c, s)))
            .map(|(c, s)| counts[c * v + (s + shift) % v])
            .collect();
        let a = majority_symbols(&table(k, v, counts.clone())).unwrap();
        let b = majority_symbols(&table(k, v, relabeled)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.purity, y.purity);
        }
        let brute = brute_majority(&events_from_counts(&rows(k, v, &counts)), k);
        for (x, y) in a.iter().zip(&brute) {
            let (symbol, purity) = y.unwrap();
            prop_assert_eq!(x.symbol, symbol);
            prop_assert!((x.purity - purity).abs() < 1e-15);
        }
    }

    #[test]
    fn contingency_margins_add_up((k, v, counts) in table_strategy()) {
        let t = table(k, v, counts);
        prop_assert_eq!(t.row_sums().iter().sum::<u64>(), t.total());
        prop_assert_eq!(t.column_sums().iter().sum::<u64>(), t.total());
    }

    #[test]
    fn softmax_outputs_are_distributions(x in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let lp = log_softmax(&x);
        prop_assert!(lp.iter().all(|v| *v <= 1e-15));
        prop_assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gumbel_soft_sample_is_a_distribution(
        logits in prop::collection::vec(-20.0f64..20.0, 2..30),
        temperature in 0.05f64..5.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(logits.clone()));
        let y = tape.gumbel_softmax(l, temperature, false, &mut rng).unwrap();
        let v = tape.value(y).values();
        prop_assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let h = tape.gumbel_softmax(l, temperature, true, &mut rng).unwrap();
        let h = tape.value(h).values();
        prop_assert_eq!(h.iter().filter(|&&p| p == 1.0).count(), 1);
        prop_assert_eq!(h.iter().filter(|&&p| p == 0.0).count(), h.len() - 1);
    }

    #[test]
    fn conv1d_matches_nested_loops(
        (c_in, c_out, width, extra) in (1usize..4, 1usize..5, 1usize..6, 0usize..10),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = width + extra;
        let x: Vec<Vec<f64>> = (0..c_in).map(|_| (0..len).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let k: Vec<Vec<Vec<f64>>> = (0..c_out)
            .map(|_| (0..c_in).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![c_in, len], x.concat()).unwrap());
        let kv = tape.constant(Tensor::new(vec![c_out, c_in, width], k.concat().concat()).unwrap());
        let bv = tape.constant(Tensor::vector(b.clone()));
        let y = tape.conv1d(xv, kv, bv).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[c_out, len - width + 1]);
        let expected = conv1d_oracle(&x, &k, &b).concat();
        for (a, e) in tape.value(y).values().iter().zip(&expected) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn table_round_trip_is_bit_exact(
        rows in prop::collection::vec((0usize..3, prop::collection::vec(-1e6f64..1e6, 4)), 1..30),
    ) {
        let concepts = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let records: Vec<CellRecord> = rows
            .into_iter()
            .map(|(label, features)| CellRecord { features, label })
            .collect();
        let ds = Dataset::new(records, concepts.clone(), 4).unwrap();
        let mut buf = Vec::new();
        write_table_to(&mut buf, &ds).unwrap();
        let schema = TableSchema { concepts, feature_dim: 4 };
        let back = read_table(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back.records, ds.records);
    }
}
