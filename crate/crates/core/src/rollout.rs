//! Attention rollout and gradient rollout.
//!
//! Each block contributes a `(heads, tokens, tokens)` tensor. Heads are
//! averaged, the identity is added for the residual path, rows are optionally
//! renormalized, and blocks are combined either by matrix product (later
//! blocks multiply on the left) or by summation `I + sum_b (A_b - I)`. The CLS row
//! of the combined matrix, minus its CLS entry, is reshaped row-major into a
//! square patch grid.

use serde::{Deserialize, Serialize};

use crate::error::{DixError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    MatrixProduct,
    Summation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduce {
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub combine: Combine,
    pub head_reduce: HeadReduce,
    pub add_identity: bool,
    pub normalize_rows: bool,
}

impl RolloutConfig {
    /// Defaults for plain attention rollout (rows renormalized).
    pub fn attention() -> Self {
        RolloutConfig {
            combine: Combine::MatrixProduct,
            head_reduce: HeadReduce::Mean,
            add_identity: true,
            normalize_rows: true,
        }
    }

    /// Defaults for gradient rollout; signed entries make row sums unusable as normalizers.
    pub fn gradient() -> Self {
        RolloutConfig {
            normalize_rows: false,
            ..Self::attention()
        }
    }
}

/// Square token-by-token matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub size: usize,
    pub values: Vec<f64>,
}

impl TokenMatrix {
    pub fn identity(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
        }
        TokenMatrix { size, values }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    /// `self * rhs`
    pub fn matmul(&self, rhs: &TokenMatrix) -> TokenMatrix {
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.values[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * rhs.values[k * n + j];
                }
            }
        }
        TokenMatrix { size: n, values: out }
    }
}

/// CLS-row attribution over patch tokens, `side x side`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub side: usize,
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }
}

/// Side of the square patch grid for a token count that includes CLS.
pub fn grid_side(tokens: usize) -> Result<usize> {
    if tokens < 2 {
        return Err(DixError::config(format!("need CLS plus at least one patch, got {tokens} tokens")));
    }
    let patches = tokens - 1;
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(DixError::config(format!(
            "{patches} patch tokens do not form a square grid"
        )));
    }
    Ok(side)
}

fn check_blocks(blocks: &[Tensor]) -> Result<usize> {
    let first = blocks
        .first()
        .ok_or_else(|| DixError::config("rollout needs at least one block"))?;
    let shape = first.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(DixError::addressing(format!(
            "attention block must be (heads, tokens, tokens), got {shape:?}"
        )));
    }
    let tokens = shape[1];
    for (i, b) in blocks.iter().enumerate() {
        let s = b.shape();
        if s.len() != 3 || s[1] != tokens || s[2] != tokens {
            return Err(DixError::addressing(format!(
                "block {i} has shape {s:?}; expected (*, {tokens}, {tokens})"
            )));
        }
    }
    Ok(tokens)
}

fn head_mean(block: &Tensor) -> TokenMatrix {
    let s = block.shape();
    let (heads, t) = (s[0], s[1]);
    let mut values = vec![0.0; t * t];
    for h in 0..heads {
        for (v, a) in values.iter_mut().zip(&block.data()[h * t * t..(h + 1) * t * t]) {
            *v += a;
        }
    }
    values.iter_mut().for_each(|v| *v /= heads as f64);
    TokenMatrix { size: t, values }
}

/// Per-block matrix after head reduction, identity and row normalization.
fn prepare(block: &Tensor, config: &RolloutConfig) -> Result<TokenMatrix> {
    let mut m = match config.head_reduce {
        HeadReduce::Mean => head_mean(block),
    };
    let n = m.size;
    if config.add_identity {
        for i in 0..n {
            m.values[i * n + i] += 1.0;
        }
    }
    if config.normalize_rows {
        for i in 0..n {
            let total: f64 = m.values[i * n..(i + 1) * n].iter().sum();
            if total == 0.0 || !total.is_finite() {
                return Err(DixError::Numerical {
                    layer: format!("rollout row {i}"),
                    detail: format!("row sum {total} cannot normalize"),
                });
            }
            m.values[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(m)
}

fn combine(prepared: Vec<TokenMatrix>, how: Combine) -> TokenMatrix {
    let n = prepared[0].size;
    match how {
        Combine::MatrixProduct => {
            let mut acc = TokenMatrix::identity(n);
            for m in &prepared {
                acc = m.matmul(&acc);
            }
            acc
        }
        Combine::Summation => {
            let mut acc = TokenMatrix {
                size: n,
                values: vec![0.0; n * n],
            };
            for m in &prepared {
                for (a, v) in acc.values.iter_mut().zip(&m.values) {
                    *a += v;
                }
            }
            let extra = (prepared.len() - 1) as f64;
            for i in 0..n {
                acc.values[i * n + i] -= extra;
            }
            acc
        }
    }
}

/// Combined rollout matrix over `blocks`.
pub fn rollout_matrix(blocks: &[Tensor], config: &RolloutConfig) -> Result<TokenMatrix> {
    check_blocks(blocks)?;
    let prepared = blocks
        .iter()
        .map(|b| prepare(b, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(prepared, config.combine))
}

/// Combined matrix over the entrywise products of attention and gradient.
pub fn gradient_rollout_matrix(
    blocks: &[Tensor],
    gradients: &[Tensor],
    config: &RolloutConfig,
) -> Result<TokenMatrix> {
    check_blocks(blocks)?;
    if blocks.len() != gradients.len() {
        return Err(DixError::addressing(format!(
            "{} attention blocks paired with {} gradients",
            blocks.len(),
            gradients.len()
        )));
    }
    let weighted = blocks
        .iter()
        .zip(gradients)
        .enumerate()
        .map(|(i, (a, g))| {
            a.zip_map(g, |x, y| x * y)
                .map_err(|e| DixError::addressing(format!("block {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    rollout_matrix(&weighted, config)
}

/// CLS row without its CLS entry, reshaped to a square grid.
pub fn cls_grid(matrix: &TokenMatrix) -> Result<PatchGrid> {
    let side = grid_side(matrix.size)?;
    Ok(PatchGrid {
        side,
        values: matrix.row(0)[1..].to_vec(),
    })
}

pub fn attention_rollout(blocks: &[Tensor], config: &RolloutConfig) -> Result<PatchGrid> {
    let tokens = check_blocks(blocks)?;
    grid_side(tokens)?;
    cls_grid(&rollout_matrix(blocks, config)?)
}

pub fn gradient_rollout(blocks: &[Tensor], gradients: &[Tensor], config: &RolloutConfig) -> Result<PatchGrid> {
    let tokens = check_blocks(blocks)?;
    grid_side(tokens)?;
    cls_grid(&gradient_rollout_matrix(blocks, gradients, config)?)
}
