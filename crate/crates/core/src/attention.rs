//! Slot attention: the shared attention primitive, the context and act
//! attention passes, and the fused slot embedding.
//!
//! For a passage matrix R and a query vector s, attention scores row i by
//! [R_i; s; R_i∘s]·k with a trainable key k, then softmaxes over unmasked
//! rows. The context pass queries X^e with q^d+q^s; the act pass queries the
//! act embeddings with the context summary Q_c.

use crate::error::{DstError, Result};
use crate::tape::{Real, Tape, Var};

/// Shapes of the attention keys. `with_acts` mirrors the ablation switch:
/// a run without act attention owns no k2 at all.
pub fn attention_param_shapes(w: usize, with_acts: bool) -> Vec<(String, Vec<usize>)> {
    let mut shapes = vec![("attn.k1".to_string(), vec![3 * w])];
    if with_acts {
        shapes.push(("attn.k2".to_string(), vec![3 * w]));
    }
    shapes
}

/// Fused slot embedding Q^o = Q^c + Q^a + q^d + q^s and its addends.
#[derive(Clone, Copy, Debug)]
pub struct FusedSlot {
    pub q_c: Var,
    /// Absent when the act sequence is empty or act attention is ablated;
    /// Q^a is then the zero vector.
    pub q_a: Option<Var>,
    pub q_o: Var,
}

/// Attention weights over the rows of `r` for a single query `s`.
///
/// Masked rows get exactly zero weight. When every row is masked (or there
/// are no rows) the weights are all zero and the empty flag is set.
pub fn attention<F: Real>(
    tape: &Tape<F>,
    r: Var,
    s: Var,
    k: Var,
    mask: &[u8],
) -> (Var, bool) {
    let n = tape.shape(r)[0];
    let h = tape.shape(s)[0];
    assert_eq!(tape.shape(r), vec![n, h], "attention: R must be n×h");
    assert_eq!(tape.shape(k), vec![3 * h], "attention: k must have length 3h");
    assert_eq!(mask.len(), n, "attention: mask length mismatch");
    let k_r = tape.slice1d(k, 0, h);
    let k_s = tape.slice1d(k, h, h);
    let k_rs = tape.slice1d(k, 2 * h, h);
    // [R_i; s; R_i∘s]·k = R_i·k_r + s·k_s + (R_i∘s)·k_rs
    let r_term = tape.matvec(r, k_r);
    let rs_term = tape.matvec(tape.mul_row_broadcast(r, s), k_rs);
    let s_term = tape.dot(s, k_s);
    let logits = tape.add_scalar_broadcast(tape.add(r_term, rs_term), s_term);
    tape.masked_softmax(logits, mask)
}

/// Context attention: α1 over X^e queried by q^d+q^s, and Q^c = (X^e)ᵀα1.
pub fn attend_context<F: Real>(
    tape: &Tape<F>,
    x_e: Var,
    query: Var,
    k1: Var,
    mask: &[u8],
) -> Result<(Var, Var)> {
    if tape.shape(x_e)[0] == 0 {
        return Err(DstError::Model(
            "attend_context: empty context (a turn always has at least one token)".to_string(),
        ));
    }
    let (alpha, empty) = attention(tape, x_e, query, k1, mask);
    if empty {
        return Err(DstError::Model(
            "attend_context: fully masked context".to_string(),
        ));
    }
    let q_c = tape.vecmat(alpha, x_e);
    Ok((q_c, alpha))
}

/// Act attention: α2 over W^act queried by Q^c, and Q^a = (W^act)ᵀα2.
/// An empty act sequence yields Q^a = 0 with no weights.
pub fn attend_acts<F: Real>(
    tape: &Tape<F>,
    w_act: Var,
    q_c: Var,
    k2: Var,
    mask: &[u8],
) -> (Var, Option<Var>) {
    let w = tape.shape(q_c)[0];
    let (alpha, empty) = attention(tape, w_act, q_c, k2, mask);
    if empty {
        return (tape.zeros1(w), None);
    }
    (tape.vecmat(alpha, w_act), Some(alpha))
}

/// Q^o = Q^c + Q^a + q^d + q^s, with Q^a the zero vector when absent.
pub fn fuse_slot<F: Real>(
    tape: &Tape<F>,
    q_c: Var,
    q_a: Option<Var>,
    query: Var,
) -> FusedSlot {
    let q_o = match q_a {
        Some(qa) => tape.add(tape.add(q_c, qa), query),
        None => tape.add(q_c, query),
    };
    FusedSlot { q_c, q_a, q_o }
}
