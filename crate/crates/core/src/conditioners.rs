//! Conditioning embeddings c^i(x) under graphical, autoregressive or
//! coupling masking.
//!
//! All three kinds run through the same shared network applied to the masked
//! input `x ⊙ A_{i,:}` concatenated with a one-hot encoding of `i`; the
//! autoregressive and coupling kinds are graphical conditioners with a fixed
//! implied adjacency. Coupling additionally substitutes stored constant
//! embeddings for the unconditioned block `i <= k`.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{one_hot_concat, MlpParams, MlpTapeIds};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionerKind {
    Graphical,
    Autoregressive,
    Coupling { k: usize },
}

impl ConditionerKind {
    /// The fixed adjacency implied by the conditioner kind, if any.
    /// Graphical conditioners take their mask from the flow step instead.
    pub fn implied_adjacency(&self, d: usize) -> Option<Tensor> {
        match self {
            ConditionerKind::Graphical => None,
            ConditionerKind::Autoregressive => Some(autoregressive_adjacency(d)),
            ConditionerKind::Coupling { k } => Some(coupling_adjacency(d, *k)),
        }
    }
}

/// A_{ij} = 1 iff j < i.
pub fn autoregressive_adjacency(d: usize) -> Tensor {
    let mut m = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..i {
            m.set(i, j, 1.0);
        }
    }
    m
}

/// A_{ij} = 1 iff i > k and j <= k (1-based), i.e. the last d-k variables
/// condition on the first k.
pub fn coupling_adjacency(d: usize, k: usize) -> Tensor {
    let mut m = Tensor::zeros(&[d, d]);
    for i in k..d {
        for j in 0..k {
            m.set(i, j, 1.0);
        }
    }
    m
}

/// Shared-network conditioner configuration and parameters.
#[derive(Clone, Debug)]
pub struct ConditionerSpec {
    pub kind: ConditionerKind,
    pub d: usize,
    pub embed_size: usize,
    /// Shared network from `[x ⊙ A_{i,:}, one_hot(i)]` (length 2d) to the
    /// embedding.
    pub network: MlpParams,
    /// Constant embeddings for coupling rows `i <= k`, trainable, zero-init.
    pub coupling_consts: Option<Tensor>,
}

impl ConditionerSpec {
    pub fn new(
        kind: ConditionerKind,
        d: usize,
        embed_size: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let ConditionerKind::Coupling { k } = kind {
            if k == 0 || k >= d {
                return Err(Error::Config(format!("coupling requires 1 <= k < d, got k={k}, d={d}")));
            }
        }
        let mut sizes = vec![2 * d];
        sizes.extend_from_slice(hidden);
        sizes.push(embed_size);
        let network = MlpParams::init(&sizes, rng);
        let coupling_consts = match kind {
            ConditionerKind::Coupling { k } => Some(Tensor::zeros(&[k, embed_size])),
            _ => None,
        };
        Ok(ConditionerSpec { kind, d, embed_size, network, coupling_consts })
    }

    /// Embedding for one dimension. `index` is the 1-based variable number;
    /// `mask_row` is row `index` of the adjacency and must be zero at the
    /// variable's own position.
    pub fn embed(&self, x: &[f64], mask_row: &[f64], index: usize) -> Result<Vec<f64>> {
        if x.len() != self.d || mask_row.len() != self.d {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![x.len()],
                rhs: vec![self.d],
            });
        }
        if index == 0 || index > self.d {
            return Err(Error::Contract(format!("embed index {index} out of range 1..={}", self.d)));
        }
        if mask_row[index - 1] != 0.0 {
            return Err(Error::Contract(format!(
                "self-conditioning: mask row has {} at position {index}",
                mask_row[index - 1]
            )));
        }
        if let ConditionerKind::Coupling { k } = self.kind {
            if index <= k {
                let consts = self.coupling_consts.as_ref().expect("coupling constants");
                return Ok(consts.row(index - 1).to_vec());
            }
        }
        let masked: Vec<f64> = x.iter().zip(mask_row).map(|(xv, mv)| xv * mv).collect();
        Ok(self.network.eval(&one_hot_concat(&masked, index)?))
    }

    /// Embeddings for every dimension at once (plain evaluation), as the
    /// rows of a [d, embed_size] tensor. Used by the sampling sweeps.
    pub fn embed_all(&self, x: &[f64], mask: &Tensor) -> Tensor {
        let d = self.d;
        let mut input = Tensor::zeros(&[d, 2 * d]);
        for i in 0..d {
            for j in 0..d {
                input.set(i, j, x[j] * mask.at(i, j));
            }
            input.set(i, d + i, 1.0);
        }
        let mut out = self.network.eval_batch(&input);
        if let ConditionerKind::Coupling { k } = self.kind {
            let consts = self.coupling_consts.as_ref().expect("coupling constants");
            for i in 0..k {
                for j in 0..self.embed_size {
                    out.set(i, j, consts.at(i, j));
                }
            }
        }
        out
    }

    /// Register the conditioner parameters on a tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ConditionerBindings {
        let net = if trainable { self.network.bind(tape) } else { self.network.bind_const(tape) };
        let consts = self.coupling_consts.as_ref().map(|c| {
            if trainable {
                tape.leaf(c.clone())
            } else {
                tape.constant(c.clone())
            }
        });
        ConditionerBindings { net, consts }
    }

    /// Batched embeddings on the tape: `x_id` is [n, d] and `mask_id` is the
    /// [d, d] adjacency (binary or relaxed, zero diagonal). The result is
    /// [n*d, embed_size] with row `r*d + i` holding c^{i+1}(x_r).
    pub fn embed_batch_on_tape(
        &self,
        tape: &mut Tape,
        x_id: NodeId,
        mask_id: NodeId,
        bind: &ConditionerBindings,
    ) -> Result<NodeId> {
        let d = self.d;
        let n = tape.value(x_id).rows();
        let xt = tape.repeat_rows(x_id, d)?; // row (r, i) = x_r
        let mt = tape.tile_rows(mask_id, n)?; // row (r, i) = A_{i,:}
        let masked = tape.mul(xt, mt)?;

        // one-hot block: row (r, i) = e_i
        let mut hot = Tensor::zeros(&[n * d, d]);
        for r in 0..n {
            for i in 0..d {
                hot.set(r * d + i, i, 1.0);
            }
        }
        let hot_c = tape.constant(hot);
        let input = tape.concat_cols(masked, hot_c)?;
        let mut out = self.network.forward_batch(tape, input, &bind.net)?;

        if let ConditionerKind::Coupling { k } = self.kind {
            // Replace rows i < k with the stored constants.
            let mut keep = Tensor::ones(&[n * d, self.embed_size]);
            for r in 0..n {
                for i in 0..k {
                    for j in 0..self.embed_size {
                        keep.set(r * d + i, j, 0.0);
                    }
                }
            }
            let keep_c = tape.constant(keep);
            let kept = tape.mul(out, keep_c)?;
            let consts_id = bind.consts.expect("coupling constants bound");
            let pad = tape.constant(Tensor::zeros(&[d - k, self.embed_size]));
            let padded = tape.concat_rows(consts_id, pad)?;
            let tiled = tape.tile_rows(padded, n)?;
            out = tape.add(kept, tiled)?;
        }
        Ok(out)
    }
}

/// Tape ids of a conditioner's parameters.
pub struct ConditionerBindings {
    pub net: MlpTapeIds,
    pub consts: Option<NodeId>,
}
