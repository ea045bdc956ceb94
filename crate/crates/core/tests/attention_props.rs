// SPDX-License-Identifier: Apache-2.0

mod oracle;

use attnuq::attention::{self, build_rollout, HeadAgg, TokenAgg};
use attnuq::testing::random_trace;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[allow(clippy::needless_range_loop)]
fn rollout_matches_dense_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let tr = random_trace(&mut rng, 6, 4, 8, 8);
        let n = tr.meta.total_tokens;
        let want = oracle::rollout(&tr);
        let got = build_rollout(&tr);
        for (l, r) in want.iter().enumerate() {
            for i in 0..n {
                let row = got.row(l, i);
                for j in 0..n {
                    worst = worst.max((row[j] - r[i][j]).abs());
                    if j > i {
                        assert_eq!(row[j], 0.0, "layer {l} ({i},{j}) above diagonal");
                    }
                }
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-4, "layer {l} row {i} sums to {sum}");
            }
        }
    }
    assert!(worst <= 1e-6, "{worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn statistics_lie_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tr = random_trace(&mut rng, 3, 3, 5, 6);
        for token in TokenAgg::ALL {
            for head in [HeadAgg::MeanHeads, HeadAgg::Rollout] {
                let s = attention::head_aggregate(&tr, token, head, None, true).unwrap();
                for v in s.values.iter().flatten() {
                    prop_assert!((-1e-12..=1.0 + 1e-6).contains(v), "{token:?}/{head:?}: {v}");
                }
            }
        }
    }

    #[test]
    fn identical_heads_average_to_any_head(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tr = random_trace(&mut rng, 2, 4, 4, 5);
        let n = tr.meta.total_tokens;
        for l in 0..tr.meta.layers {
            for h in 1..tr.meta.heads {
                for i in 0..n {
                    let src = tr.attention.row(l, 0, i).to_vec();
                    tr.attention.row_mut(l, h, i).copy_from_slice(&src);
                }
            }
        }
        for token in TokenAgg::ALL {
            let mean = attention::head_aggregate(&tr, token, HeadAgg::MeanHeads, None, false).unwrap();
            for l in 0..tr.meta.layers {
                let single = &attention::layer_head_stats(&tr, l, token)[0];
                for (a, b) in mean.values[l].iter().zip(single) {
                    // heads summed then divided: exact for up to 4 equal f32-derived values
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn input_mass_is_bounded_by_past_mass(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tr = random_trace(&mut rng, 2, 2, 5, 5);
        let m = tr.meta.input_tokens as f64;
        for l in 0..tr.meta.layers {
            let input = attention::layer_head_stats(&tr, l, TokenAgg::InputTokens);
            let past = attention::layer_head_stats(&tr, l, TokenAgg::AllPast);
            for h in 0..tr.meta.heads {
                for t in 1..=tr.meta.generated_tokens {
                    let abs = tr.meta.row_of(t);
                    let diag = tr.attention.get(l, h, abs, abs) as f64;
                    let lhs = m * input[h][t - 1];
                    let mid = abs as f64 * past[h][t - 1] + diag;
                    prop_assert!(lhs <= abs as f64 * past[h][t - 1] + 1e-9);
                    prop_assert!(mid <= 1.0 + 1e-4);
                }
            }
        }
    }
}
