//! Full model assembly: encoder, slot-query attention, act attention, and
//! the prediction heads, wired per turn and per slot.
//!
//! A `Model` owns the configuration, vocabulary, and parameter store. Each
//! forward pass places the parameters on a fresh tape; a batch shares one
//! tape so gradients accumulate across its examples.

use indexmap::IndexMap;

use crate::attention::{attend_acts, attend_context, attention_param_shapes, fuse_slot};
use crate::corpus::{exact_match_features, Label, SpanType, TurnExample};
use crate::encoder::{encoder_param_shapes, EmbeddingConfig, Encoder, Vocab};
use crate::error::{DstError, Result};
use crate::heads::{
    classify_span_type, classify_value, head_param_shapes, span_distributions, span_loss,
    type_loss, value_loss,
};
use crate::ontology::{Ontology, SlotKey, SlotKind};
use crate::params::ParamStore;
use crate::tape::{Real, Tape, Var};

/// Per-slot forward outputs for one turn.
#[derive(Clone, Debug)]
pub struct SlotForward {
    pub key: SlotKey,
    /// α1 over context tokens.
    pub alpha_context: Var,
    /// α2 over the act sequence; absent when the sequence is empty or act
    /// attention is disabled.
    pub alpha_acts: Option<Var>,
    pub outputs: SlotOutputs,
}

#[derive(Clone, Debug)]
pub enum SlotOutputs {
    Categorical {
        /// Distribution over the slot's option set.
        p_v: Var,
    },
    NonCategorical {
        /// Distribution over (SPAN, NONE, DONT_CARE).
        p_type: Var,
        p_start: Var,
        p_end: Var,
    },
}

/// Forward outputs for one turn: encoded context plus one entry per slot,
/// in ontology slot order.
#[derive(Clone, Debug)]
pub struct TurnForward {
    pub x_e: Var,
    pub slots: Vec<SlotForward>,
}

/// Shapes of every trainable tensor. `exact_dim` is the ontology slot count
/// feeding the exact-match feature block.
pub fn model_param_shapes(
    cfg: &EmbeddingConfig,
    vocab: &Vocab,
    exact_dim: usize,
    act_attention: bool,
) -> Vec<(String, Vec<usize>)> {
    let mut shapes = encoder_param_shapes(cfg, vocab, exact_dim);
    shapes.extend(attention_param_shapes(cfg.w(), act_attention));
    shapes.extend(head_param_shapes(cfg.w()));
    shapes
}

#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub cfg: EmbeddingConfig,
    pub act_attention: bool,
    pub vocab: Vocab,
    /// Ontology slot count at init; forward passes must agree.
    pub exact_dim: usize,
    pub params: ParamStore<F>,
}

impl<F: Real> Model<F> {
    /// Initializes all parameters deterministically from the seed.
    pub fn init(
        cfg: EmbeddingConfig,
        act_attention: bool,
        vocab: Vocab,
        ontology: &Ontology,
        seed: u64,
    ) -> Result<Model<F>> {
        cfg.validate()?;
        let exact_dim = ontology.slot_count();
        let shapes = model_param_shapes(&cfg, &vocab, exact_dim, act_attention);
        let params = ParamStore::init(&shapes, seed);
        Ok(Model {
            cfg,
            act_attention,
            vocab,
            exact_dim,
            params,
        })
    }

    /// Places parameters on the tape and returns the variable map shared by
    /// every example in the batch.
    pub fn place(&self, tape: &Tape<F>) -> IndexMap<String, Var> {
        self.params.place_on(tape)
    }

    pub fn encoder<'a>(
        &'a self,
        tape: &'a Tape<F>,
        vars: &'a IndexMap<String, Var>,
    ) -> Encoder<'a, F> {
        Encoder::new(tape, &self.cfg, &self.vocab, vars)
    }

    /// Runs the turn forward: encode the context once, then attend and
    /// classify per slot. `inventory` is the corpus act inventory.
    pub fn forward_example(
        &self,
        enc: &Encoder<'_, F>,
        vars: &IndexMap<String, Var>,
        example: &TurnExample,
        ontology: &Ontology,
        inventory: &[String],
    ) -> Result<TurnForward> {
        if ontology.slot_count() != self.exact_dim {
            return Err(DstError::Model(format!(
                "ontology has {} slots but the model was built for {}",
                ontology.slot_count(),
                self.exact_dim
            )));
        }
        if example.context.is_empty() {
            return Err(DstError::Model(format!(
                "empty context for dialogue {:?} turn {}",
                example.dialogue_id, example.turn
            )));
        }
        let tape = enc.tape;
        let exact = exact_match_features(&example.context, ontology);
        let x = enc.embed_tokens(&example.context, &example.roles, &exact)?;
        let x_e = enc.encode_context(x);
        let ctx_mask = vec![1u8; example.context.len()];
        let w_act = if self.act_attention {
            Some(enc.embed_acts(&example.acts, inventory)?)
        } else {
            None
        };
        let act_mask = vec![1u8; example.acts.len()];
        let k1 = vars["attn.k1"];

        let mut slots = Vec::with_capacity(ontology.slot_count());
        for key in &ontology.slots {
            let sq = enc.embed_slot_query(key);
            let (q_c, alpha1) = attend_context(tape, x_e, sq.query, k1, &ctx_mask)?;
            let (q_a, alpha2) = match w_act {
                Some(acts) => {
                    let (q_a, alpha2) = attend_acts(tape, acts, q_c, vars["attn.k2"], &act_mask);
                    (alpha2.map(|_| q_a), alpha2)
                }
                None => (None, None),
            };
            let fused = fuse_slot(tape, q_c, q_a, sq.query);
            let outputs = match ontology.kind(key)? {
                SlotKind::Categorical => {
                    let options = ontology.option_set(key)?;
                    let p_e = enc.embed_options(sq.query, &options.options)?;
                    let p_v = classify_value(tape, p_e, fused.q_o, vars["heads.theta_v"]);
                    SlotOutputs::Categorical { p_v }
                }
                SlotKind::NonCategorical => {
                    let p_type = classify_span_type(
                        tape,
                        fused.q_o,
                        vars["heads.type_w1"],
                        vars["heads.type_b1"],
                        vars["heads.type_w2"],
                        vars["heads.type_b2"],
                    );
                    let (p_start, p_end) = span_distributions(
                        tape,
                        x_e,
                        fused.q_o,
                        vars["heads.theta_s"],
                        vars["heads.theta_e"],
                        vars["heads.c1_w"],
                        vars["heads.c1_b"],
                        vars["heads.c2_w"],
                        vars["heads.c2_b"],
                        &ctx_mask,
                    )?;
                    SlotOutputs::NonCategorical {
                        p_type,
                        p_start,
                        p_end,
                    }
                }
            };
            slots.push(SlotForward {
                key: key.clone(),
                alpha_context: alpha1,
                alpha_acts: alpha2,
                outputs,
            });
        }
        Ok(TurnForward { x_e, slots })
    }

    /// L = L_v + L_type + L_s summed over the turn's slots. Value loss runs
    /// only on categorical slots; type and position losses only on
    /// non-categorical ones, positions only when the gold type is SPAN.
    pub fn example_loss(
        &self,
        tape: &Tape<F>,
        forward: &TurnForward,
        example: &TurnExample,
    ) -> Result<Var> {
        let mut total = tape.scalar(F::zero());
        for slot in &forward.slots {
            let label = example.labels.get(&slot.key).ok_or_else(|| {
                DstError::Model(format!("no label for slot {} in example", slot.key))
            })?;
            match (&slot.outputs, label) {
                (SlotOutputs::Categorical { p_v }, Label::Categorical { value_index }) => {
                    total = tape.add(total, value_loss(tape, *p_v, *value_index)?);
                }
                (
                    SlotOutputs::NonCategorical {
                        p_type,
                        p_start,
                        p_end,
                    },
                    Label::NonCategorical { span_type, span },
                ) => {
                    total = tape.add(total, type_loss(tape, *p_type, *span_type));
                    if *span_type == SpanType::Span {
                        let gold = span.ok_or_else(|| {
                            DstError::Model(format!(
                                "slot {} labeled SPAN without positions",
                                slot.key
                            ))
                        })?;
                        total = tape.add(total, span_loss(tape, *p_start, *p_end, gold)?);
                    }
                }
                _ => {
                    return Err(DstError::Model(format!(
                        "label kind mismatch for slot {}",
                        slot.key
                    )));
                }
            }
        }
        Ok(total)
    }

    /// Sum of example losses over a batch sharing one tape.
    pub fn batch_loss(
        &self,
        tape: &Tape<F>,
        enc: &Encoder<'_, F>,
        vars: &IndexMap<String, Var>,
        examples: &[&TurnExample],
        ontology: &Ontology,
        inventory: &[String],
    ) -> Result<Var> {
        let mut total = tape.scalar(F::zero());
        for example in examples {
            let forward = self.forward_example(enc, vars, example, ontology, inventory)?;
            total = tape.add(total, self.example_loss(tape, &forward, example)?);
        }
        Ok(total)
    }

    /// Converts parameter precision, preserving values exactly in the
    /// f32 → f64 direction.
    pub fn map_precision<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            act_attention: self.act_attention,
            vocab: self.vocab.clone(),
            exact_dim: self.exact_dim,
            params: self.params.map_precision(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_examples, load_dialogues, LoadOptions, WarningSink};
    use crate::encoder::ProviderKind;
    
    use crate::tape::Gradients;

    fn small_cfg() -> EmbeddingConfig {
        EmbeddingConfig {
            word_dim: 6,
            char_dim: 6,
            char_emb_dim: 4,
            role_dim: 4,
            provider: ProviderKind::TrainableLookup,
        }
    }

    fn cambridge() -> (crate::corpus::Corpus, Ontology, Vec<TurnExample>) {
        let mut sink = WarningSink::new();
        let ontology = Ontology::load("fixtures/cambridge/ontology.json".as_ref()).unwrap();
        let corpus = load_dialogues(
            "fixtures/cambridge/dialogues.json".as_ref(),
            &ontology,
            &LoadOptions::default(),
            &mut sink,
        )
        .unwrap();
        let examples = build_examples(&corpus, &ontology, 512, &mut sink).unwrap();
        (corpus, ontology, examples)
    }

    fn forward_turn(
        model: &Model<f64>,
        example: &TurnExample,
        ontology: &Ontology,
        inventory: &[String],
    ) -> (Tape<f64>, IndexMap<String, Var>, TurnForward) {
        let tape = Tape::new();
        let vars = model.place(&tape);
        let fwd = {
            let enc = model.encoder(&tape, &vars);
            model
                .forward_example(&enc, &vars, example, ontology, inventory)
                .unwrap()
        };
        (tape, vars, fwd)
    }

    #[test]
    fn forward_emits_one_output_per_slot_with_correct_shapes() {
        let (corpus, ontology, examples) = cambridge();
        let model: Model<f64> =
            Model::init(small_cfg(), true, Vocab::build(&corpus, &ontology), &ontology, 7)
                .unwrap();
        let ex = &examples[1];
        let (tape, _, fwd) = forward_turn(&model, ex, &ontology, &corpus.act_inventory);
        assert_eq!(fwd.slots.len(), ontology.slot_count());
        assert_eq!(
            tape.shape(fwd.x_e),
            vec![ex.context.len(), model.cfg.w()]
        );
        for slot in &fwd.slots {
            assert_eq!(tape.shape(slot.alpha_context), vec![ex.context.len()]);
            let alpha2 = slot.alpha_acts.expect("turn 2 has acts");
            assert_eq!(tape.shape(alpha2), vec![ex.acts.len()]);
            match &slot.outputs {
                SlotOutputs::Categorical { p_v } => {
                    let n = ontology.option_set(&slot.key).unwrap().options.len();
                    assert_eq!(tape.shape(*p_v), vec![n]);
                    let sum: f64 = tape.vec_value(*p_v).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
                SlotOutputs::NonCategorical {
                    p_type,
                    p_start,
                    p_end,
                } => {
                    assert_eq!(tape.shape(*p_type), vec![3]);
                    assert_eq!(tape.shape(*p_start), vec![ex.context.len()]);
                    assert_eq!(tape.shape(*p_end), vec![ex.context.len()]);
                    for p in [p_type, p_start, p_end] {
                        let sum: f64 = tape.vec_value(*p).iter().sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn first_turn_has_no_act_weights() {
        let (corpus, ontology, examples) = cambridge();
        let model: Model<f64> =
            Model::init(small_cfg(), true, Vocab::build(&corpus, &ontology), &ontology, 7)
                .unwrap();
        let (_tape, _, fwd) = forward_turn(&model, &examples[0], &ontology, &corpus.act_inventory);
        assert!(fwd.slots.iter().all(|s| s.alpha_acts.is_none()));
    }

    #[test]
    fn ablated_model_has_no_act_weights_and_no_k2() {
        let (corpus, ontology, examples) = cambridge();
        let model: Model<f64> =
            Model::init(small_cfg(), false, Vocab::build(&corpus, &ontology), &ontology, 7)
                .unwrap();
        assert!(!model.params.values.contains_key("attn.k2"));
        let (_tape, _, fwd) = forward_turn(&model, &examples[1], &ontology, &corpus.act_inventory);
        assert!(fwd.slots.iter().all(|s| s.alpha_acts.is_none()));
    }

    #[test]
    fn example_loss_is_finite_positive_and_batch_additive() {
        let (corpus, ontology, examples) = cambridge();
        let model: Model<f64> =
            Model::init(small_cfg(), true, Vocab::build(&corpus, &ontology), &ontology, 7)
                .unwrap();
        let mut singles = Vec::new();
        for ex in &examples {
            let tape = Tape::new();
            let vars = model.place(&tape);
            let enc = model.encoder(&tape, &vars);
            let fwd = model
                .forward_example(&enc, &vars, ex, &ontology, &corpus.act_inventory)
                .unwrap();
            let loss = tape.scalar_value(model.example_loss(&tape, &fwd, ex).unwrap());
            assert!(loss.is_finite() && loss > 0.0);
            singles.push(loss);
        }
        let tape = Tape::new();
        let vars = model.place(&tape);
        let enc = model.encoder(&tape, &vars);
        let refs: Vec<&TurnExample> = examples.iter().collect();
        let batch = tape.scalar_value(
            model
                .batch_loss(&tape, &enc, &vars, &refs, &ontology, &corpus.act_inventory)
                .unwrap(),
        );
        let sum: f64 = singles.iter().sum();
        assert!((batch - sum).abs() < 1e-9 * sum.abs().max(1.0));
    }

    #[test]
    fn loss_gradients_reach_every_head_and_attention_parameter() {
        let (corpus, ontology, examples) = cambridge();
        let model: Model<f64> =
            Model::init(small_cfg(), true, Vocab::build(&corpus, &ontology), &ontology, 7)
                .unwrap();
        let ex = &examples[3];
        let tape = Tape::new();
        let vars = model.place(&tape);
        let enc = model.encoder(&tape, &vars);
        let fwd = model
            .forward_example(&enc, &vars, ex, &ontology, &corpus.act_inventory)
            .unwrap();
        let loss = model.example_loss(&tape, &fwd, ex).unwrap();
        let grads: Gradients<f64> = tape.backward(loss);
        for name in [
            "attn.k1",
            "attn.k2",
            "heads.theta_v",
            "heads.theta_s",
            "heads.theta_e",
            "heads.type_w1",
            "heads.type_w2",
            "heads.c1_w",
            "heads.c2_w",
            "embed.word",
            "embed.char",
            "embed.role",
            "gru.fwd.w_z",
            "gru.bwd.w_z",
        ] {
            let g = grads.get(vars[name]).unwrap_or_else(|| {
                panic!("no gradient for {name}")
            });
            assert!(
                g.iter().any(|&x| x != 0.0),
                "gradient for {name} is all zero"
            );
        }
    }

    #[test]
    fn frozen_provider_blocks_word_table_gradients_end_to_end() {
        let (corpus, ontology, examples) = cambridge();
        let cfg = EmbeddingConfig {
            provider: ProviderKind::FrozenRandom { seed: 11 },
            ..small_cfg()
        };
        let model: Model<f64> =
            Model::init(cfg, true, Vocab::build(&corpus, &ontology), &ontology, 7).unwrap();
        let ex = &examples[1];
        let tape = Tape::new();
        let vars = model.place(&tape);
        let enc = model.encoder(&tape, &vars);
        let fwd = model
            .forward_example(&enc, &vars, ex, &ontology, &corpus.act_inventory)
            .unwrap();
        let loss = model.example_loss(&tape, &fwd, ex).unwrap();
        let grads = tape.backward(loss);
        // context words come from the frozen provider, but slot and value
        // names still read the trainable table
        let g_word = grads.get_or_zeros(vars["embed.word"], model.params.get("embed.word").shape());
        assert!(g_word.iter().any(|&x| x != 0.0));
        // char gradients flow regardless of the provider
        let g_char = grads.get(vars["embed.char"]).unwrap();
        assert!(g_char.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn forward_rejects_mismatched_ontology_width() {
        let (corpus, ontology, examples) = cambridge();
        let mut model: Model<f64> =
            Model::init(small_cfg(), true, Vocab::build(&corpus, &ontology), &ontology, 7)
                .unwrap();
        model.exact_dim += 1;
        let tape = Tape::new();
        let vars = model.place(&tape);
        let enc = model.encoder(&tape, &vars);
        assert!(model
            .forward_example(&enc, &vars, &examples[0], &ontology, &corpus.act_inventory)
            .is_err());
    }

    #[test]
    fn precision_round_trip_is_exact_for_f32_values() {
        let (corpus, ontology, _) = cambridge();
        let model: Model<f32> =
            Model::init(small_cfg(), true, Vocab::build(&corpus, &ontology), &ontology, 7)
                .unwrap();
        let up: Model<f64> = model.map_precision();
        let back: Model<f32> = up.map_precision();
        for (name, value) in &model.params.values {
            assert_eq!(value, &back.params.values[name]);
        }
    }
}
