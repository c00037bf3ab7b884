use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rewardlab::baselines::sparsify;
use rewardlab::eval::{corpus_bleu, ibleu, sentence_bleu, Smoothing};
use rewardlab::reward::{rewards_to_go, RewardFn, RewardShaping, ShiftField, TrajectoryReward};
use rewardlab::rl::sample_trajectory;
use rewardlab::scorer::log_softmax_masked;
use rewardlab::{LogitSource, ScorerConfig, ScorerParams, Token, BOS, PAD};

fn sentence(max_len: usize) -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(3u32..9, 0..max_len)
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<Token>, Vec<Token>)>> {
    prop::collection::vec((sentence(9), sentence(9)), 1..12)
}

fn micro_scorer(seed: u64, scale: f64) -> ScorerParams {
    let cfg = ScorerConfig {
        vocab_size: 6,
        embed_dim: 3,
        hidden_dim: 4,
        horizon: 4,
        aligned_source: true,
    };
    ScorerParams::init_uniform(cfg, seed, scale).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_bleu_ignores_pair_order(pairs in corpus(), shuffle_seed in any::<u64>()) {
        let cands: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let pc: Vec<_> = order.iter().map(|&i| cands[i].clone()).collect();
        let pr: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
        for n in [2, 4] {
            let a = corpus_bleu(&cands, &refs, n).unwrap();
            let b = corpus_bleu(&pc, &pr, n).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
        }
    }

    #[test]
    fn corpus_bleu_of_references_is_100(refs in prop::collection::vec(prop::collection::vec(3u32..9, 4..9), 1..8)) {
        let b = corpus_bleu(&refs, &refs, 4).unwrap();
        prop_assert!((b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn sentence_bleu_is_a_fraction(c in sentence(9), r in sentence(9)) {
        for s in [Smoothing::None, Smoothing::AddOne] {
            let b = sentence_bleu(&c, &r, 4, s);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b), "{b}");
        }
    }

    #[test]
    fn ibleu_is_linear(b in 0.0f64..100.0, s in 0.0f64..100.0, alpha in 0.0f64..1.0) {
        let v = ibleu(b, s, alpha);
        prop_assert!((v - ((1.0 - alpha) * b - alpha * s)).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_normalized_over_legal_tokens(
        logits in prop::collection::vec(-50.0f64..50.0, 3..12),
        temperature in 0.05f64..20.0,
    ) {
        let lp = log_softmax_masked(&logits, temperature);
        prop_assert_eq!(lp[BOS as usize], f64::NEG_INFINITY);
        prop_assert_eq!(lp[PAD as usize], f64::NEG_INFINITY);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn softmax_ignores_additive_constants(
        logits in prop::collection::vec(-20.0f64..20.0, 3..10),
        shift in -100.0f64..100.0,
    ) {
        let a = log_softmax_masked(&logits, 1.0);
        let moved: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let b = log_softmax_masked(&moved, 1.0);
        for (x, y) in a.iter().zip(&b) {
            if x.is_finite() {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sparsify_moves_the_total_to_the_end(r in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let s = sparsify(&r);
        prop_assert_eq!(s.len(), r.len());
        prop_assert!(s[..s.len() - 1].iter().all(|v| *v == 0.0));
        prop_assert!((s.iter().sum::<f64>() - r.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn rewards_to_go_are_suffix_sums(r in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let q = rewards_to_go(&r);
        prop_assert!((q[0] - r.iter().sum::<f64>()).abs() < 1e-9);
        for t in 0..r.len() - 1 {
            prop_assert!((q[t] - q[t + 1] - r[t]).abs() < 1e-9);
        }
        prop_assert_eq!(q[r.len() - 1], r[r.len() - 1]);
    }

    #[test]
    fn shaping_stays_in_the_clip_range(raw in -1e6f64..1e6) {
        let v = RewardShaping::default().apply(raw);
        prop_assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn shift_moves_rewards_to_go_by_the_state_constant(
        scorer_seed in 0u64..1000,
        field_seed in any::<u64>(),
        sample_seed in any::<u64>(),
        amplitude in 0.1f64..10.0,
    ) {
        let params = micro_scorer(scorer_seed, 1.0);
        let source = vec![3, 4, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let traj = sample_trajectory(&params, &source, 1.0, &mut rng).unwrap();
        let field = ShiftField::Hashed { seed: field_seed, amplitude };
        let base = RewardFn::raw(params.clone());
        let q = rewards_to_go(&base.rewards(&traj).unwrap());
        let shifted = RewardFn::raw(params.clone()).apply_shift(field).unwrap();
        let qs = rewards_to_go(&shifted.rewards(&traj).unwrap());
        for t in 0..traj.len() {
            let c = field.value(&source, &traj.prefix(t));
            prop_assert!((qs[t] - q[t] - c).abs() < 1e-12, "t={t}: {} vs {} + {c}", qs[t], q[t]);
        }
    }

    #[test]
    fn induced_return_never_exceeds_the_first_logit(scorer_seed in 0u64..1000, sample_seed in any::<u64>()) {
        let params = micro_scorer(scorer_seed, 2.0);
        let source = vec![4, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let traj = sample_trajectory(&params, &source, 1.0, &mut rng).unwrap();
        let q = rewards_to_go(&RewardFn::raw(params.clone()).rewards(&traj).unwrap());
        let f1 = params.logits(&source, &[BOS]).unwrap()[traj.actions[0] as usize];
        prop_assert!(q[0] <= f1 + 1e-9);
    }
}
