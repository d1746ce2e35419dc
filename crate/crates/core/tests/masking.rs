//! Locality of the mix-token attention mask.

mod common;

use common::{encoder, max_row_diff, mix_out, D, K_G, K_L, S};
use focuspar::mgmt::{build_attention_mask, partition_patches, MaskOptions};
use focuspar::nn::normal;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn mask_rows_follow_the_partition() {
    let part = partition_patches(S, K_L).unwrap();
    let m = build_attention_mask(K_G, K_L, S, &part, MaskOptions::default()).unwrap();
    let k = K_G + K_L;
    for i in 0..K_L {
        for c in 0..m.n {
            let want = c >= k && part[i].contains(&(c - k));
            assert_eq!(m.get(K_G + i, c), want);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// One layer: a local mix token reads only its own subset, so changing a
    /// patch elsewhere leaves its output untouched. Global tokens do move.
    #[test]
    fn single_layer_local_token_ignores_foreign_patches(
        seed in any::<u64>(),
        subset in 0..K_L,
        pick in 0..S,
        delta in prop::collection::vec(-2.0f32..2.0, D),
    ) {
        let part = partition_patches(S, K_L).unwrap();
        let foreign: Vec<usize> = (0..S).filter(|j| !part[subset].contains(j)).collect();
        let patch = foreign[pick % foreign.len()];
        let (enc, store) = encoder::<f32>(1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let tokens = normal::<f32>(&mut rng, S, D, 1.0);
        let mut moved = tokens.clone();
        for (x, d) in moved.row_mut(patch).iter_mut().zip(&delta) {
            *x += d;
        }
        let (a, b) = (mix_out(&enc, &store, &tokens), mix_out(&enc, &store, &moved));
        prop_assert!(max_row_diff(&a, &b, K_G + subset) <= 1e-6);
        if delta.iter().any(|d| d.abs() > 0.1) {
            prop_assert!((0..K_G).any(|g| max_row_diff(&a, &b, g) > 0.0));
        }
    }

    /// Full stack: patches attend to each other, so a local token's output
    /// depends on foreign patches, but only as an unordered set.
    #[test]
    fn full_stack_is_invariant_to_permuting_foreign_patches(seed in any::<u64>(), subset in 0..K_L) {
        let part = partition_patches(S, K_L).unwrap();
        let foreign: Vec<usize> = (0..S).filter(|j| !part[subset].contains(j)).collect();
        let (enc, store) = encoder::<f64>(2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let tokens = normal::<f64>(&mut rng, S, D, 1.0);
        let mut rotated = tokens.clone();
        for (n, &dst) in foreign.iter().enumerate() {
            let src = foreign[(n + 1) % foreign.len()];
            rotated.row_mut(dst).copy_from_slice(tokens.row(src));
        }
        let (a, b) = (mix_out(&enc, &store, &tokens), mix_out(&enc, &store, &rotated));
        prop_assert!(max_row_diff(&a, &b, K_G + subset) < 1e-12);
    }
}
