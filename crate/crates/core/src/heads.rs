//! Prediction heads and losses: bilinear value classification for
//! categorical slots, span-type and span-position prediction for
//! non-categorical slots, and the cross-entropy terms they train on.
//!
//! Class order for span types is the serialization contract
//! (SPAN, NONE, DONT_CARE). All losses are sums, never means, so batch and
//! turn losses add up per the double summation over turns and slots.

use crate::corpus::SpanType;
use crate::error::{DstError, Result};
use crate::tape::{Real, Tape, Var};

/// Index of a span type in the fixed class order.
pub fn span_type_index(t: SpanType) -> usize {
    match t {
        SpanType::Span => 0,
        SpanType::None => 1,
        SpanType::DontCare => 2,
    }
}

pub fn span_type_from_index(i: usize) -> SpanType {
    match i {
        0 => SpanType::Span,
        1 => SpanType::None,
        2 => SpanType::DontCare,
        _ => panic!("span type index {i} out of range"),
    }
}

/// Shapes of every head parameter.
///
/// The span-type scorer is a two-layer feed-forward map (w → w with a
/// rectifier, then w → 3 linear); a single rectified layer could never emit
/// negative logits. The position scorers keep the single rectified layer the
/// bilinear forms expect.
pub fn head_param_shapes(w: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("heads.theta_v".to_string(), vec![w, w]),
        ("heads.theta_s".to_string(), vec![w, w]),
        ("heads.theta_e".to_string(), vec![w, w]),
        ("heads.type_w1".to_string(), vec![w, w]),
        ("heads.type_b1".to_string(), vec![w]),
        ("heads.type_w2".to_string(), vec![w, 3]),
        ("heads.type_b2".to_string(), vec![3]),
        ("heads.c1_w".to_string(), vec![w, w]),
        ("heads.c1_b".to_string(), vec![w]),
        ("heads.c2_w".to_string(), vec![w, w]),
        ("heads.c2_b".to_string(), vec![w]),
    ]
}

/// p^v = softmax(P^e Θ^v Q^o) over the option order.
pub fn classify_value<F: Real>(tape: &Tape<F>, p_e: Var, q_o: Var, theta_v: Var) -> Var {
    let projected = tape.matvec(theta_v, q_o);
    let logits = tape.matvec(p_e, projected);
    tape.softmax(logits)
}

/// Cross entropy −log p[gold] against a probability vector.
pub fn value_loss<F: Real>(tape: &Tape<F>, p_v: Var, gold: usize) -> Result<Var> {
    let n = tape.shape(p_v)[0];
    if gold >= n {
        return Err(DstError::Model(format!(
            "gold option index {gold} out of range for {n} options"
        )));
    }
    Ok(tape.neg(tape.ln(tape.index(p_v, gold))))
}

/// p^span = softmax(FFN_type(Q^o)) over (SPAN, NONE, DONT_CARE).
pub fn classify_span_type<F: Real>(
    tape: &Tape<F>,
    q_o: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Var {
    let hidden = tape.relu(tape.add(tape.vecmat(q_o, w1), b1));
    let logits = tape.add(tape.vecmat(hidden, w2), b2);
    tape.softmax(logits)
}

/// Start/end position distributions:
/// p^st = softmax(FFN_c1(X^e) Θ^s Q^o), p^end = softmax(FFN_c2(X^e) Θ^e Q^o).
#[allow(clippy::too_many_arguments)]
pub fn span_distributions<F: Real>(
    tape: &Tape<F>,
    x_e: Var,
    q_o: Var,
    theta_s: Var,
    theta_e: Var,
    c1_w: Var,
    c1_b: Var,
    c2_w: Var,
    c2_b: Var,
    mask: &[u8],
) -> Result<(Var, Var)> {
    if tape.shape(x_e)[0] == 0 {
        return Err(DstError::Model(
            "span_distributions: empty context".to_string(),
        ));
    }
    let one = |w: Var, b: Var, theta: Var| {
        let ffn = tape.relu(tape.add_row_broadcast(tape.matmul(x_e, w), b));
        let logits = tape.matvec(ffn, tape.matvec(theta, q_o));
        let (p, empty) = tape.masked_softmax(logits, mask);
        if empty {
            return Err(DstError::Model(
                "span_distributions: fully masked context".to_string(),
            ));
        }
        Ok(p)
    };
    let p_st = one(c1_w, c1_b, theta_s)?;
    let p_end = one(c2_w, c2_b, theta_e)?;
    Ok((p_st, p_end))
}

/// Argmax of p_st[s]·p_end[e] over pairs with s ≤ e ≤ s+max_len−1.
/// Ties break toward the smaller start, then the smaller end.
#[allow(clippy::needless_range_loop)]
pub fn decode_span<F: Real>(p_st: &[F], p_end: &[F], max_len: usize) -> (usize, usize) {
    assert_eq!(p_st.len(), p_end.len(), "decode_span: length mismatch");
    assert!(!p_st.is_empty(), "decode_span: empty distributions");
    assert!(max_len >= 1, "decode_span: max_len must be positive");
    let n = p_st.len();
    let mut best = (0usize, 0usize);
    let mut best_score = F::from_f64(f64::NEG_INFINITY);
    for s in 0..n {
        for e in s..n.min(s + max_len) {
            let score = p_st[s] * p_end[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

/// Cross entropy of the span-type prediction against the gold type.
pub fn type_loss<F: Real>(tape: &Tape<F>, p_span: Var, gold: SpanType) -> Var {
    tape.neg(tape.ln(tape.index(p_span, span_type_index(gold))))
}

/// Sum of start and end cross entropies. Call only when the gold type is
/// SPAN; NONE and DONT_CARE carry no position supervision.
pub fn span_loss<F: Real>(
    tape: &Tape<F>,
    p_st: Var,
    p_end: Var,
    gold: (usize, usize),
) -> Result<Var> {
    let n = tape.shape(p_st)[0];
    let (s, e) = gold;
    if s >= n || e >= n || s > e {
        return Err(DstError::Model(format!(
            "gold span ({s},{e}) out of range for context length {n}"
        )));
    }
    Ok(tape.add(
        tape.neg(tape.ln(tape.index(p_st, s))),
        tape.neg(tape.ln(tape.index(p_end, e))),
    ))
}

/// L = L_v + L_type + L_s.
pub fn total_loss<F: Real>(tape: &Tape<F>, terms: &[Var]) -> Var {
    let mut total = tape.scalar(F::zero());
    for &term in terms {
        total = tape.add(total, term);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_grads, randn};
    use ndarray::{arr1, arr2, Array2, ArrayD};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_bilinear_gives_uniform_values() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p_e = tape.constant(randn(&mut rng, &[5, 4]));
        let q_o = tape.constant(randn(&mut rng, &[4]));
        let theta = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[4, 4])));
        let p_v = classify_value(&tape, p_e, q_o, theta);
        for p in tape.vec_value(p_v) {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_bilinear_prefers_matching_row() {
        let tape: Tape<f64> = Tape::new();
        // orthonormal option rows; row 2 equals Q_o
        let p_e = tape.constant(
            arr2(&[
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ])
            .into_dyn(),
        );
        let q_o = tape.constant(arr1(&[0.0, 0.0, 1.0]).into_dyn());
        let theta = tape.constant(Array2::<f64>::eye(3).into_dyn());
        let p_v = tape.vec_value(classify_value(&tape, p_e, q_o, theta));
        let argmax = p_v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn classify_value_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.random_range(2..6);
            let w = rng.random_range(2..5);
            let p_e = randn(&mut rng, &[n, w]);
            let q_o = randn(&mut rng, &[w]);
            let theta = randn(&mut rng, &[w, w]);
            let tape: Tape<f64> = Tape::new();
            let got = tape.vec_value(classify_value(
                &tape,
                tape.constant(p_e.clone()),
                tape.constant(q_o.clone()),
                tape.constant(theta.clone()),
            ));
            // straight-line oracle
            let mut logits = vec![0.0; n];
            for i in 0..n {
                for a in 0..w {
                    for b in 0..w {
                        logits[i] += p_e[[i, a]] * theta[[a, b]] * q_o[[b]];
                    }
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for i in 0..n {
                assert!((got[i] - exps[i] / total).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn value_loss_analytic_cases() {
        let tape: Tape<f64> = Tape::new();
        let one_hot = tape.constant(arr1(&[0.0, 1.0, 0.0]).into_dyn());
        assert_eq!(
            tape.scalar_value(value_loss(&tape, one_hot, 1).unwrap()),
            0.0
        );
        let uniform = tape.constant(arr1(&[0.2; 5]).into_dyn());
        let loss = tape.scalar_value(value_loss(&tape, uniform, 3).unwrap());
        assert!((loss - 5.0_f64.ln()).abs() < 1e-12);
        assert!(value_loss(&tape, uniform, 5).is_err());
    }

    #[test]
    fn zero_type_head_is_uniform_over_three_classes() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q_o = tape.constant(randn(&mut rng, &[4]));
        let w1 = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[4, 4])));
        let b1 = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[4])));
        let w2 = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[4, 3])));
        let b2 = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[3])));
        let p = tape.vec_value(classify_span_type(&tape, q_o, w1, b1, w2, b2));
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn span_type_matches_two_layer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let w = rng.random_range(2..6);
            let q_o = randn(&mut rng, &[w]);
            let w1 = randn(&mut rng, &[w, w]);
            let b1 = randn(&mut rng, &[w]);
            let w2 = randn(&mut rng, &[w, 3]);
            let b2 = randn(&mut rng, &[3]);
            let tape: Tape<f64> = Tape::new();
            let got = tape.vec_value(classify_span_type(
                &tape,
                tape.constant(q_o.clone()),
                tape.constant(w1.clone()),
                tape.constant(b1.clone()),
                tape.constant(w2.clone()),
                tape.constant(b2.clone()),
            ));
            let mut hidden = vec![0.0; w];
            for j in 0..w {
                let mut v = b1[[j]];
                for i in 0..w {
                    v += q_o[[i]] * w1[[i, j]];
                }
                hidden[j] = v.max(0.0);
            }
            let mut logits = [0.0; 3];
            for j in 0..3 {
                let mut v = b2[[j]];
                for i in 0..w {
                    v += hidden[i] * w2[[i, j]];
                }
                logits[j] = v;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let sum: f64 = got.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..3 {
                assert!((got[j] - exps[j] / total).abs() < 1e-6);
            }
        }
    }

    fn span_setup(
        rng: &mut ChaCha8Rng,
        n: usize,
        w: usize,
    ) -> Vec<ArrayD<f64>> {
        vec![
            randn(rng, &[n, w]), // x_e
            randn(rng, &[w]),    // q_o
            randn(rng, &[w, w]), // theta_s
            randn(rng, &[w, w]), // theta_e
            randn(rng, &[w, w]), // c1_w
            randn(rng, &[w]),    // c1_b
            randn(rng, &[w, w]), // c2_w
            randn(rng, &[w]),    // c2_b
        ]
    }

    fn build_span(
        t: &Tape<f64>,
        v: &[Var],
        mask: &[u8],
    ) -> (Var, Var) {
        span_distributions(t, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], mask).unwrap()
    }

    #[test]
    fn span_distributions_normalize_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = span_setup(&mut rng, 5, 4);
        let mask = [1u8, 1, 0, 1, 1];
        let tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        let (p_st, p_end) = build_span(&tape, &vars, &mask);
        for p in [p_st, p_end] {
            let v = tape.vec_value(p);
            assert_eq!(v[2], 0.0);
            let sum: f64 = v.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn singleton_context_pins_span_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = span_setup(&mut rng, 1, 3);
        let tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        let (p_st, p_end) = build_span(&tape, &vars, &[1]);
        assert_eq!(tape.vec_value(p_st), vec![1.0]);
        assert_eq!(tape.vec_value(p_end), vec![1.0]);
    }

    #[test]
    fn span_distributions_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(1..6);
            let w = rng.random_range(2..5);
            let inputs = span_setup(&mut rng, n, w);
            let mask = vec![1u8; n];
            let tape: Tape<f64> = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
            let (p_st, _) = build_span(&tape, &vars, &mask);
            let got = tape.vec_value(p_st);
            // oracle for the start distribution
            let (x_e, q_o, theta_s, c1_w, c1_b) =
                (&inputs[0], &inputs[1], &inputs[2], &inputs[4], &inputs[5]);
            let mut logits = vec![0.0; n];
            for i in 0..n {
                let mut ffn = vec![0.0; w];
                for j in 0..w {
                    let mut v = c1_b[[j]];
                    for a in 0..w {
                        v += x_e[[i, a]] * c1_w[[a, j]];
                    }
                    ffn[j] = v.max(0.0);
                }
                for a in 0..w {
                    for b in 0..w {
                        logits[i] += ffn[a] * theta_s[[a, b]] * q_o[[b]];
                    }
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for i in 0..n {
                assert!((got[i] - exps[i] / total).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_context_span_head_errors() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_e = tape.empty_matrix(3);
        let rest: Vec<Var> = span_setup(&mut rng, 1, 3)[1..]
            .iter()
            .map(|a| tape.constant(a.clone()))
            .collect();
        assert!(span_distributions(
            &tape, x_e, rest[0], rest[1], rest[2], rest[3], rest[4], rest[5], rest[6], &[],
        )
        .is_err());
    }

    #[test]
    fn decode_span_basic_and_degenerate() {
        let st = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let en = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(decode_span(&st, &en, 10), (3, 5));
        // max_len 1 forces start = end
        let st2 = [0.1, 0.6, 0.3];
        let en2 = [0.5, 0.4, 0.1];
        assert_eq!(decode_span(&st2, &en2, 1), (1, 1));
        // exact ties fall back to the smallest start, then end
        let flat = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(decode_span(&flat, &flat, 10), (0, 0));
    }

    #[test]
    fn decode_span_respects_order_constraint() {
        // end mass strictly before start mass: best valid pair still has e >= s
        let st = [0.04, 0.06, 0.9];
        let en = [0.9, 0.05, 0.05];
        let (s, e) = decode_span(&st, &en, 10);
        assert!(s <= e);
        assert_eq!((s, e), (2, 2));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn decode_span_matches_brute_force_on_fuzzed_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..9);
            let max_len = rng.random_range(1..5);
            let norm = |mut v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let st = norm((0..n).map(|_| rng.random_range(0.01..1.0)).collect());
            let en = norm((0..n).map(|_| rng.random_range(0.01..1.0)).collect());
            let got = decode_span(&st, &en, max_len);
            let mut best = (0, 0);
            let mut best_score = f64::NEG_INFINITY;
            for s in 0..n {
                for e in s..n.min(s + max_len) {
                    if st[s] * en[e] > best_score {
                        best_score = st[s] * en[e];
                        best = (s, e);
                    }
                }
            }
            assert_eq!(got, best);
            assert!(got.0 <= got.1 && got.1 < n);
        }
    }

    #[test]
    fn losses_compose_additively() {
        let tape: Tape<f64> = Tape::new();
        let p_span = tape.constant(arr1(&[0.5, 0.3, 0.2]).into_dyn());
        let p_st = tape.constant(arr1(&[0.7, 0.2, 0.1]).into_dyn());
        let p_end = tape.constant(arr1(&[0.1, 0.8, 0.1]).into_dyn());
        let lt = type_loss(&tape, p_span, SpanType::Span);
        let ls = span_loss(&tape, p_st, p_end, (0, 1)).unwrap();
        let total = total_loss(&tape, &[lt, ls]);
        let want = -(0.5_f64.ln()) - 0.7_f64.ln() - 0.8_f64.ln();
        assert!((tape.scalar_value(total) - want).abs() < 1e-12);
        // perfect one-hot predictions give zero loss
        let hot3 = tape.constant(arr1(&[1.0, 0.0, 0.0]).into_dyn());
        let zero = total_loss(
            &tape,
            &[
                type_loss(&tape, hot3, SpanType::Span),
                span_loss(&tape, hot3, hot3, (0, 0)).unwrap(),
            ],
        );
        assert_eq!(tape.scalar_value(zero), 0.0);
    }

    #[test]
    fn span_loss_validates_gold_positions() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(arr1(&[0.5, 0.5]).into_dyn());
        assert!(span_loss(&tape, p, p, (0, 2)).is_err());
        assert!(span_loss(&tape, p, p, (1, 0)).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // value head plus its loss
        let p_e = randn(&mut rng, &[4, 3]);
        let q_o = randn(&mut rng, &[3]);
        let theta = randn(&mut rng, &[3, 3]);
        check_grads(
            |t, v| {
                let p = classify_value(t, v[0], v[1], v[2]);
                value_loss(t, p, 2).unwrap()
            },
            &[p_e, q_o, theta],
            1e-3,
            1e-4,
        );
        // span head plus both position losses
        let inputs = span_setup(&mut rng, 5, 4);
        check_grads(
            |t, v| {
                let (p_st, p_end) = build_span(t, v, &[1, 1, 1, 1, 1]);
                span_loss(t, p_st, p_end, (1, 3)).unwrap()
            },
            &inputs,
            1e-3,
            1e-4,
        );
        // type head and its loss
        let q = randn(&mut rng, &[4]);
        let w1 = randn(&mut rng, &[4, 4]);
        let b1 = randn(&mut rng, &[4]);
        let w2 = randn(&mut rng, &[4, 3]);
        let b2 = randn(&mut rng, &[3]);
        check_grads(
            |t, v| {
                let p = classify_span_type(t, v[0], v[1], v[2], v[3], v[4]);
                type_loss(t, p, SpanType::DontCare)
            },
            &[q, w1, b1, w2, b2],
            1e-3,
            1e-4,
        );
    }

    #[test]
    fn single_sgd_step_rarely_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lr = 1e-3;
        let mut increases = 0;
        for _ in 0..100 {
            let w = 4;
            let n_opts = 4;
            let p_e_val = randn(&mut rng, &[n_opts, w]);
            let q_o_val = randn(&mut rng, &[w]);
            let mut theta_val = randn(&mut rng, &[w, w]);
            let gold = rng.random_range(0..n_opts);
            let eval = |theta: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
                let tape: Tape<f64> = Tape::new();
                let p_e = tape.constant(p_e_val.clone());
                let q_o = tape.constant(q_o_val.clone());
                let th = tape.param(theta.clone());
                let p = classify_value(&tape, p_e, q_o, th);
                let loss = value_loss(&tape, p, gold).unwrap();
                let grads = tape.backward(loss);
                (
                    tape.scalar_value(loss),
                    grads.get_or_zeros(th, theta.shape()),
                )
            };
            let (before, grad) = eval(&theta_val);
            theta_val = theta_val - grad.mapv(|g| g * lr);
            let (after, _) = eval(&theta_val);
            if after > before + 1e-12 {
                increases += 1;
            }
        }
        assert!(increases <= 5, "loss increased in {increases}/100 trials");
    }
}
