mod common;

use dixray::rollout::{
    attention_rollout, cls_grid, gradient_rollout, gradient_rollout_matrix, grid_side, rollout_matrix, Combine,
    RolloutConfig, TokenMatrix,
};
use dixray::Tensor;
use proptest::prelude::*;

/// `(heads, tokens, tokens)` with positive, row-normalized entries.
fn stochastic_block(heads: usize, tokens: usize, raw: &[f64]) -> Tensor {
    let mut data = raw[..heads * tokens * tokens].to_vec();
    for row in data.chunks_mut(tokens) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![heads, tokens, tokens], data).unwrap()
}

fn blocks_strategy() -> impl Strategy<Value = Vec<Tensor>> {
    (1usize..=6, 1usize..=3, 1usize..=4).prop_flat_map(|(n, heads, side)| {
        let t = side * side + 1;
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, heads * t * t), n)
            .prop_map(move |raws| raws.iter().map(|r| stochastic_block(heads, t, r)).collect())
    })
}

fn signed_like(blocks: &[Tensor], raw: &[f64]) -> Vec<Tensor> {
    let mut k = 0;
    blocks
        .iter()
        .map(|b| {
            Tensor::from_fn(b.shape(), |_| {
                k += 1;
                raw[k % raw.len()]
            })
        })
        .collect()
}

proptest! {
    #[test]
    fn attention_rollout_stays_row_stochastic(blocks in blocks_strategy()) {
        let m = rollout_matrix(&blocks, &RolloutConfig::attention()).unwrap();
        for i in 0..m.size {
            prop_assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn unit_gradients_reduce_to_attention_rollout(blocks in blocks_strategy(), normalize in any::<bool>()) {
        let ones: Vec<Tensor> = blocks.iter().map(|b| Tensor::full(b.shape(), 1.0)).collect();
        let cfg = RolloutConfig { normalize_rows: normalize, ..RolloutConfig::attention() };
        let gr = gradient_rollout(&blocks, &ones, &cfg).unwrap();
        let ar = attention_rollout(&blocks, &cfg).unwrap();
        prop_assert_eq!(gr.side, ar.side);
        for (a, b) in gr.values.iter().zip(&ar.values) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_block_product_equals_summation(
        blocks in blocks_strategy(),
        raw in prop::collection::vec(-1.0f64..1.0, 7),
        normalize in any::<bool>(),
    ) {
        let block = &blocks[..1];
        let grads = signed_like(block, &raw);
        let product = RolloutConfig { normalize_rows: normalize, ..RolloutConfig::gradient() };
        let sum = RolloutConfig { combine: Combine::Summation, ..product };
        prop_assert_eq!(
            gradient_rollout(block, &grads, &product).unwrap(),
            gradient_rollout(block, &grads, &sum).unwrap()
        );
        prop_assert_eq!(attention_rollout(block, &product).unwrap(), attention_rollout(block, &sum).unwrap());
    }

    #[test]
    fn gradient_rollout_matches_matrix_oracle(blocks in blocks_strategy(), raw in prop::collection::vec(-1.0f64..1.0, 11)) {
        let grads = signed_like(&blocks, &raw);
        let grid = gradient_rollout(&blocks, &grads, &RolloutConfig::gradient()).unwrap();
        let oracle = common::gradient_rollout_oracle(&blocks, &grads);
        for (a, b) in grid.values.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn reshape_is_row_major_and_invertible(side in 1usize..=16, seed in any::<u64>()) {
        let t = side * side + 1;
        let values = common::uniform(&[t * t], seed).into_data();
        let m = TokenMatrix { size: t, values: values.clone() };
        let grid = cls_grid(&m).unwrap();
        prop_assert_eq!(grid.side, side);
        prop_assert_eq!(grid_side(t).unwrap() * grid_side(t).unwrap(), t - 1);
        for r in 0..side {
            for c in 0..side {
                prop_assert_eq!(grid.get(r, c), values[1 + r * side + c]);
            }
        }
        let flat: Vec<f64> = (0..side * side).map(|p| grid.get(p / side, p % side)).collect();
        prop_assert_eq!(flat, values[1..t].to_vec());
    }
}

#[test]
fn vit_base_token_count_gives_14_by_14() {
    assert_eq!(grid_side(197).unwrap(), 14);
    assert_eq!(grid_side(17).unwrap(), 4);
    assert!(grid_side(196).is_err());
    let t = 197;
    let block = Tensor::from_fn(&[1, t, t], |i| if (i / t) % t == i % t { 1.0 } else { 0.0 });
    let grid = attention_rollout(&[block], &RolloutConfig::attention()).unwrap();
    assert_eq!((grid.side, grid.values.len()), (14, 196));
}

#[test]
fn zero_gradients_combine_to_identity_under_both_rules() {
    let blocks: Vec<Tensor> = (0..4).map(|s| stochastic_block(2, 5, common::uniform(&[50], s).data())).collect();
    let zeros: Vec<Tensor> = blocks.iter().map(|b| Tensor::zeros(b.shape())).collect();
    for combine in [Combine::MatrixProduct, Combine::Summation] {
        let cfg = RolloutConfig { combine, ..RolloutConfig::gradient() };
        assert_eq!(gradient_rollout_matrix(&blocks, &zeros, &cfg).unwrap(), TokenMatrix::identity(5));
    }
}
