use proptest::prelude::*;

use prunekv_core::kvcache::{retained_count, SegmentedKVCache, TokenRole};
use prunekv_core::numerics::{softmax_f64, softmax_row};
use prunekv_core::policy::{
    apply_intervention, bottomk_select, topk_select, AttentionIntervention,
};

/// Reference selection: stable sort by value, ties broken by index.
fn sort_oracle(values: &[f64], k: usize, largest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a].partial_cmp(&values[b]).unwrap();
        let ord = if largest { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    let mut out = idx[..k].to_vec();
    out.sort();
    out
}

fn values_with_ties() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..6, 1..40)
        .prop_map(|v| v.into_iter().map(|x| x as f64 / 8.0).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f32..30.0, 1..64)) {
        let p = softmax_row(&logits).unwrap();
        let sum: f64 = p.iter().map(|&x| x as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-10.0f64..10.0, 1..32), c in -50.0f64..50.0) {
        let a = softmax_f64(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        let b = softmax_f64(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_and_bottomk_match_sort(values in values_with_ties(), k_seed in 0usize..1000) {
        let k = 1 + k_seed % values.len();
        prop_assert_eq!(topk_select(&values, k).unwrap(), sort_oracle(&values, k, true));
        prop_assert_eq!(bottomk_select(&values, k).unwrap(), sort_oracle(&values, k, false));
    }

    #[test]
    fn topk_is_permutation_covariant(
        values in prop::collection::vec(0.0f64..1.0, 2..30),
        k_seed in 0usize..100,
        perm_seed in any::<u64>(),
    ) {
        let n = values.len();
        let k = 1 + k_seed % n;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let mut a: Vec<f64> = topk_select(&values, k).unwrap().iter().map(|&i| values[i]).collect();
        let mut b: Vec<f64> = topk_select(&permuted, k).unwrap().iter().map(|&i| permuted[i]).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn removing_keys_raises_every_survivor(
        scores in prop::collection::vec(-8.0f64..8.0, 2..48),
        mask_bits in any::<u64>(),
    ) {
        let n = scores.len();
        let keep: Vec<usize> = (0..n).filter(|i| mask_bits >> (i % 64) & 1 == 1).collect();
        prop_assume!(!keep.is_empty() && keep.len() < n);
        let full = softmax_f64(&scores).unwrap();
        let sub: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
        let pruned = softmax_f64(&sub).unwrap();
        for (j, &i) in keep.iter().enumerate() {
            prop_assert!(pruned[j] > full[i]);
        }
    }

    #[test]
    fn amplification_keeps_visual_order_and_mass(
        raw in prop::collection::vec(0.01f64..1.0, 2..40),
        split in 1usize..39,
        factor in 0.1f64..8.0,
    ) {
        let n = raw.len();
        let split = split.min(n - 1);
        let z: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let roles: Vec<TokenRole> = (0..n)
            .map(|i| if i < split { TokenRole::PromptText } else { TokenRole::Visual })
            .collect();
        let mut out = row.clone();
        apply_intervention(&mut out, &roles, &AttentionIntervention::amplify(factor)).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in split..n {
            for j in split..n {
                prop_assert_eq!(row[i] < row[j], out[i] < out[j]);
            }
        }
    }

    #[test]
    fn sequential_prunes_compose(
        n in 2usize..24,
        first_bits in any::<u32>(),
        second_bits in any::<u32>(),
    ) {
        let build = || {
            let mut c = SegmentedKVCache::new(1, 2);
            c.append(0, &[-1.0, 0.0], &[0.0, 0.0], TokenRole::PromptText, 0).unwrap();
            for i in 0..n {
                c.append(0, &[i as f32, 1.0], &[0.0, i as f32], TokenRole::Visual, i + 1).unwrap();
            }
            c.append(0, &[-2.0, 0.0], &[0.0, 0.0], TokenRole::Generated, n + 1).unwrap();
            c
        };
        let a: Vec<usize> = (0..n).filter(|i| first_bits >> i & 1 == 1).collect();
        let b: Vec<usize> = (0..a.len()).filter(|i| second_bits >> i & 1 == 1).collect();
        let mut twice = build();
        twice.prune_visual(0, &a).unwrap();
        twice.prune_visual(0, &b).unwrap();
        let composed: Vec<usize> = b.iter().map(|&i| a[i]).collect();
        let mut once = build();
        once.prune_visual(0, &composed).unwrap();
        prop_assert_eq!(twice.content_bytes(), once.content_bytes());
        prop_assert_eq!(twice.retained_visual(0), composed.as_slice());
    }

    #[test]
    fn retained_count_bounds(n in 1usize..10_000, r in 0.01f64..0.99) {
        let k = retained_count(n, r).unwrap();
        prop_assert!(k >= 1 && k <= n);
        prop_assert!(k as f64 <= (r * n as f64).max(1.0) + 1e-6);
    }
}
