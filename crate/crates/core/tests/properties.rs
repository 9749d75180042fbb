mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqforget::lm::{backward, seq_logprob, LanguageModel, TableModel, TargetSpec};
use seqforget::losses::ret_loss_soft;
use seqforget::metrics::{self, bleu, chrf, overlap_n};
use seqforget::TokenSeq;

#[test]
fn uniform_model_sequence_log_probability() {
    let m = TableModel::new(256, 8);
    let lp = seq_logprob(&m, &[10, 20, 30]).unwrap();
    assert!((lp - 2.0 * (1.0f64 / 256.0).ln()).abs() < 1e-12);
    assert!((lp + 11.0904).abs() < 1e-4);
}

#[test]
fn zero_weight_backward_is_null() {
    let p = common::random_model(&common::tiny_config(), 4);
    let x = [1u32, 5, 9, 2];
    let (loss, g) = backward(&p, &x, &TargetSpec::zeros(3), 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.data.iter().all(|&v| v == 0.0));
}

#[test]
fn one_hot_targets_reproduce_sequence_log_probability() {
    let p = common::random_model(&common::tiny_config(), 6);
    let x = [3u32, 1, 4, 1, 5, 9, 2, 6];
    let (loss, _) = backward(&p, &x, &TargetSpec::hard(&x), 1.0).unwrap();
    let lp = seq_logprob(&p, &x).unwrap();
    assert!((loss + lp).abs() < 1e-4 * lp.abs().max(1.0), "{loss} vs {lp}");
}

#[test]
fn soft_retain_loss_is_never_negative() {
    let cfg = common::tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models: Vec<_> = (0..20).map(|s| common::random_model(&cfg, 100 + s)).collect();
    for trial in 0..1000 {
        let (a, b) = (&models[trial % 20], &models[(trial * 7 + 3) % 20]);
        let seqs = common::random_seqs(&mut rng, 1, (2, 6), 32, "s");
        let kl = ret_loss_soft(a, b, &seqs).unwrap();
        // f32 forward passes round the log-probabilities
        assert!(kl >= -1e-6, "trial {trial}: {kl}");
    }
}

/// Next-token table where the true token always has probability `q` and the
/// rest is spread evenly.
fn constant_truth_table(x: &[u32], vocab: usize, q: f64) -> TableModel {
    let mut m = TableModel::new(vocab, 32);
    for t in 1..x.len() {
        let mut probs = vec![(1.0 - q) / (vocab - 1) as f64; vocab];
        probs[x[t] as usize] = q;
        m = m.with_entry(&x[..t], probs).unwrap();
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_stay_in_unit_interval(seed in 0u64..1000, len in 3usize..14) {
        let p = common::random_model(&common::tiny_config(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_seqs(&mut rng, 1, (len, len), 32, "x").remove(0).tokens;
        let m = metrics::evaluate(&p, &x, 2).unwrap();
        prop_assert!(m.in_range());
        let r = p.next_token_logprobs(&x).unwrap();
        prop_assert_eq!(r.rows(), x.len());
    }

    #[test]
    fn rma_is_the_mean_true_token_probability_and_monotone(
        x in proptest::collection::vec(0u32..4, 3..10),
        q1 in 0.01f64..0.98,
        dq in 0.001f64..0.01,
    ) {
        let q2 = (q1 + dq).min(0.99);
        let lo = metrics::rma(&constant_truth_table(&x, 4, q1), &x).unwrap();
        let hi = metrics::rma(&constant_truth_table(&x, 4, q2), &x).unwrap();
        prop_assert!((lo - q1).abs() < 1e-12);
        prop_assert!(lo < hi);
    }

    #[test]
    fn overlap_scores_are_bounded(
        a in proptest::collection::vec(0u32..6, 0..12),
        b in proptest::collection::vec(0u32..6, 0..12),
        n in 1usize..5,
    ) {
        let o = overlap_n(&a, &b, n);
        prop_assert!((0.0..=1.0).contains(&o));
        if !a.is_empty() && !b.is_empty() {
            let s = bleu(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((bleu(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chrf_is_bounded_and_reflexive(h in "[a-d ]{1,16}", r in "[a-d ]{1,16}") {
        let s = chrf(&h, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((chrf(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn memorizing_table_scores_one_everywhere() {
    let x: Vec<u32> = vec![7, 3, 9, 3, 1, 4];
    let m = TableModel::memorizing(16, 16, &[&x]).unwrap();
    let t = metrics::evaluate(&m, &x, 2).unwrap();
    assert_eq!((t.el, t.ma, t.rma), (1.0, 1.0, 1.0));
    let seqs = vec![TokenSeq::new("x", x).unwrap()];
    assert_eq!(ret_loss_soft(&m, &m, &seqs).unwrap(), 0.0);
}
