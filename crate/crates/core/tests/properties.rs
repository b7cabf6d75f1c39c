mod common;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::{gaussian, random_orthogonal, rng};
use xsense::alignment::{eval_retrieval, LinearMap};
use xsense::anchors::{mine_anchors, mine_anchors_reversed, BilingualLexicon, ParallelSentence};
use xsense::embstore::{EmbeddingRecord, EmbeddingStore};
use xsense::evaluation::{
    f_score, mcnemar, parse_instances, unpaired_t_test, ContingencyPair, GoldKeys, Predictions,
};
use xsense::sensemodel::{infer_dense, infer_sparse, pmi_table, DenseSenseBank, SenseMatrix};
use xsense::sparsecode::SparseCode;

fn record_strategy(dim: usize) -> impl Strategy<Value = (u64, u32, String, Option<String>, Vec<f32>)> {
    (
        0u64..50,
        0u32..40,
        "[a-zé]{1,8}",
        proptest::option::of("[a-z]{1,6}"),
        proptest::collection::vec(-1e3f32..1e3, dim),
    )
}

fn store_strategy() -> impl Strategy<Value = EmbeddingStore> {
    (1usize..6, -4i8..0).prop_flat_map(|(dim, layer)| {
        proptest::collection::vec(record_strategy(dim), 0..12).prop_map(move |records| {
            let mut store = EmbeddingStore::new(dim, "de", "enc-test");
            for (i, (sentence_id, token_index, surface, lemma, vector)) in records.into_iter().enumerate() {
                store
                    .push(EmbeddingRecord {
                        record_id: i as u64 * 3 + 1,
                        sentence_id,
                        token_index,
                        surface,
                        lemma,
                        layer,
                        vector,
                    })
                    .unwrap();
            }
            store
        })
    })
}

fn sentence_strategy() -> impl Strategy<Value = Vec<ParallelSentence>> {
    let side = |prefix: &'static str| {
        proptest::collection::vec(0u8..6, 1..7)
            .prop_map(move |ws| ws.iter().map(|w| format!("{prefix}{w}")).collect::<Vec<_>>())
    };
    proptest::collection::vec((side("s"), side("t")), 1..6).prop_map(|pairs| {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (source_tokens, target_tokens))| ParallelSentence {
                pair_id: i as u64,
                source_tokens,
                target_tokens,
            })
            .collect()
    })
}

/// Gap between the best and the runner-up score.
fn margin(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted.len() < 2 {
        f64::INFINITY
    } else {
        sorted[0] - sorted[1]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_round_trips(store in store_strategy()) {
        let bytes = store.to_bytes().unwrap();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn anchor_mining_is_role_symmetric(
        sentences in sentence_strategy(),
        pairs in proptest::collection::vec((0u8..6, 0u8..6), 0..10),
    ) {
        let lex = BilingualLexicon::symmetric(pairs.iter().map(|(s, t)| (format!("s{s}"), format!("t{t}"))));
        let forward = mine_anchors(&sentences, &lex);
        let mut reversed: Vec<_> = mine_anchors_reversed(&sentences, &lex)
            .into_iter()
            .map(|a| (a.pair_id, a.tgt_index, a.src_index))
            .collect();
        let mut forward: Vec<_> = forward.into_iter().map(|a| (a.pair_id, a.src_index, a.tgt_index)).collect();
        forward.sort_unstable();
        reversed.sort_unstable();
        prop_assert_eq!(forward, reversed);
    }

    #[test]
    fn npmi_stays_in_unit_range(
        cells in proptest::collection::vec(0.0f64..5.0, 12),
        zeros in proptest::collection::vec(any::<bool>(), 12),
        smoothing in 0.0f64..2.0,
    ) {
        let counts = DMatrix::from_fn(3, 4, |r, c| if zeros[r * 4 + c] { 0.0 } else { cells[r * 4 + c] });
        prop_assume!(counts.sum() > 0.0);
        let npmi = pmi_table(&counts, smoothing, true);
        prop_assert!(npmi.iter().all(|v| v.is_finite() && (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)), "{}", npmi);
    }

    #[test]
    fn independent_tables_have_zero_pmi(
        rows in proptest::collection::vec(0.1f64..3.0, 3),
        cols in proptest::collection::vec(0.1f64..3.0, 5),
    ) {
        let counts = DMatrix::from_fn(3, 5, |r, c| rows[r] * cols[c]);
        for normalized in [false, true] {
            let t = pmi_table(&counts, 0.0, normalized);
            prop_assert!(t.amax() < 1e-9, "{}", t);
        }
    }

    #[test]
    fn sparse_inference_ignores_code_scale_and_column_shifts(
        phi in proptest::collection::vec(-2.0f64..2.0, 4 * 5),
        code in proptest::collection::vec(0.0f64..1.5, 5),
        scale in 0.1f64..10.0,
        column in 0usize..5,
        shift in -3.0f64..3.0,
    ) {
        let senses: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let phi = DMatrix::from_row_slice(4, 5, &phi);
        let m = SenseMatrix::new(phi.clone(), false, senses.clone()).unwrap();
        let a = SparseCode::from_dense(&code);
        let scores: Vec<f64> = senses.iter().map(|s| m.score(s, &a).unwrap()).collect();
        prop_assume!(margin(&scores) > 1e-9);
        let base = infer_sparse(&a, &m, &senses).unwrap();

        let scaled: Vec<f64> = code.iter().map(|v| v * scale).collect();
        prop_assert_eq!(&infer_sparse(&SparseCode::from_dense(&scaled), &m, &senses).unwrap(), &base);

        let mut shifted = phi;
        shifted.column_mut(column).add_scalar_mut(shift);
        let m2 = SenseMatrix::new(shifted, false, senses.clone()).unwrap();
        prop_assert_eq!(&infer_sparse(&a, &m2, &senses).unwrap(), &base);
    }

    #[test]
    fn dense_inference_ignores_vector_scale(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let centroids = gaussian(4, 6, &mut r);
        let x: DVector<f64> = gaussian(6, 1, &mut r).column(0).into();
        let senses: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let bank = DenseSenseBank::new(centroids, vec![1; 4], senses.clone()).unwrap();
        let scores: Vec<f64> = senses.iter().map(|s| bank.cosine(s, &x).unwrap()).collect();
        prop_assume!(margin(&scores) > 1e-9);
        let base = infer_dense(&x, &bank, None, &senses).unwrap();
        prop_assert_eq!(infer_dense(&(&x * scale), &bank, None, &senses).unwrap(), base);
    }

    #[test]
    fn retrieval_is_invariant_to_a_shared_rotation(seed in 0u64..1000, noise in 0.0f64..1.0) {
        let mut r = rng(seed);
        let x = gaussian(30, 8, &mut r);
        let y = &x + gaussian(30, 8, &mut r) * noise;
        let q = random_orthogonal(8, &mut r);
        let id = LinearMap::identity(8);
        let plain = eval_retrieval(&id, &x, &y).unwrap();
        let rotated = eval_retrieval(&id, &(&x * &q), &(&y * &q)).unwrap();
        prop_assert_eq!(plain.accuracy_at_1, rotated.accuracy_at_1);
        prop_assert_eq!(plain.n, 30);
    }

    #[test]
    fn f_score_is_bounded_and_consistent(
        gold_senses in proptest::collection::vec(0u8..3, 1..30),
        guesses in proptest::collection::vec(proptest::option::of(0u8..3), 30),
    ) {
        let mut gold = GoldKeys::new();
        let mut predictions = Predictions::new();
        for (i, g) in gold_senses.iter().enumerate() {
            gold.insert(format!("i{i}"), [format!("k{g}")]).unwrap();
            if let Some(p) = guesses[i] {
                predictions.insert(format!("i{i}"), format!("k{p}"));
            }
        }
        let f = f_score(&predictions, &gold);
        prop_assert_eq!(f.total, gold_senses.len());
        prop_assert!(f.correct <= f.attempted && f.attempted <= f.total);
        for v in [f.precision, f.recall, f.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(f.f1 <= f.precision.max(f.recall) + 1e-12);
        prop_assert!(f.f1 >= f.precision.min(f.recall) - 1e-12);
        prop_assert!(f.recall <= f.precision + 1e-12);
        // Predictions for unknown ids change nothing.
        let mut extra = predictions.clone();
        extra.insert("zz".into(), "k0".into());
        prop_assert_eq!(f_score(&extra, &gold), f);
    }

    #[test]
    fn mcnemar_is_symmetric(b in 0u64..200, c in 0u64..200, continuity in any::<bool>()) {
        prop_assume!(b + c > 0);
        let table = |b, c| ContingencyPair { b, c, both_correct: 7, both_wrong: 3 };
        let x = mcnemar(&table(b, c), continuity).unwrap();
        let y = mcnemar(&table(c, b), continuity).unwrap();
        prop_assert_eq!(x, y);
        prop_assert!(x.statistic >= 0.0 && (0.0..=1.0).contains(&x.p_value));
    }

    #[test]
    fn t_test_flips_sign_when_samples_swap(
        a in proptest::collection::vec(-10.0f64..10.0, 2..15),
        b in proptest::collection::vec(-10.0f64..10.0, 2..15),
    ) {
        let (Ok(x), Ok(y)) = (unpaired_t_test(&a, &b), unpaired_t_test(&b, &a)) else {
            return Ok(());
        };
        prop_assert_eq!(x.t, -y.t);
        prop_assert_eq!(x.dof, y.dof);
        prop_assert_eq!(x.p_value, y.p_value);
        prop_assert!((0.0..=1.0).contains(&x.p_value));
    }

    #[test]
    fn parsed_instances_match_the_markup(
        sentences in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 1..6), 1..6),
    ) {
        let mut xml = String::from("<corpus lang=\"xx\"><text id=\"d\">");
        let mut expected = Vec::new();
        for (s, tokens) in sentences.iter().enumerate() {
            write!(xml, "<sentence id=\"d.s{s}\">").unwrap();
            for (t, &is_instance) in tokens.iter().enumerate() {
                if is_instance {
                    let id = format!("d.s{s}.t{t}");
                    write!(xml, "<instance id=\"{id}\" lemma=\"bank\" pos=\"NOUN\">bank</instance>").unwrap();
                    expected.push((id, s as u64, t as u32));
                } else {
                    xml.push_str("<wf lemma=\"the\" pos=\"DET\">the</wf>");
                }
            }
            xml.push_str("</sentence>");
        }
        xml.push_str("</text></corpus>");
        let parsed = parse_instances(&xml).unwrap();
        let got: Vec<_> = parsed.iter().map(|i| (i.instance_id.clone(), i.sentence_id, i.token_start)).collect();
        prop_assert_eq!(got, expected);
        let ids: BTreeSet<_> = parsed.iter().map(|i| &i.instance_id).collect();
        prop_assert_eq!(ids.len(), parsed.len());
        prop_assert!(parsed.iter().all(|i| i.token_end == i.token_start + 1 && i.pos == "NOUN" && i.lemma == "bank"));
    }
}
