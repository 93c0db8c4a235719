//! Embedding and context encoding: word/char/role embeddings, the char CNN,
//! the bidirectional GRU over the dialogue context, act embeddings, slot
//! queries, and categorical option embeddings.
//!
//! Every token-level vector has dimension w = word_dim + char_dim: a word
//! part (from the provider or the trainable table) concatenated with a char
//! CNN part. Context rows additionally carry role and exact-match blocks,
//! which the GRU folds back into w-dimensional outputs.

use crate::corpus::{ActRef, Role};
use crate::error::{DstError, Result};
use crate::ontology::SlotKey;
use crate::tape::{Real, Tape, Var};
use crate::text::tokenize;
use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

/// Where context-token and act word vectors come from. Slot and value name
/// embeddings always use the trainable table, since the heads train against
/// them directly.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderKind {
    /// Random-init lookup table trained with the rest of the model.
    TrainableLookup,
    /// Frozen per-token random vectors, a stand-in for a pretrained
    /// contextual embedder when running offline. Deterministic in `seed`.
    FrozenRandom { seed: u64 },
}

impl ProviderKind {
    pub fn trainable(&self) -> bool {
        matches!(self, ProviderKind::TrainableLookup)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Per-character embedding width feeding the char CNN.
    pub char_emb_dim: usize,
    pub role_dim: usize,
    pub provider: ProviderKind,
}

impl EmbeddingConfig {
    /// Token vector width; also the encoder output width.
    pub fn w(&self) -> usize {
        self.word_dim + self.char_dim
    }

    /// Hidden size per GRU direction; two directions concatenate back to w.
    pub fn gru_hidden(&self) -> usize {
        self.w() / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.char_dim == 0 || self.char_emb_dim == 0 || self.role_dim == 0
        {
            return Err(DstError::Config(
                "embedding dimensions must be positive".to_string(),
            ));
        }
        if !self.w().is_multiple_of(2) {
            return Err(DstError::Config(format!(
                "word_dim + char_dim = {} must be even to split across GRU directions",
                self.w()
            )));
        }
        if self.char_dim < 3 {
            return Err(DstError::Config(
                "char_dim must be at least 3 to cover the three kernel widths".to_string(),
            ));
        }
        Ok(())
    }

    /// The published model dimensions.
    pub fn full_scale() -> Self {
        EmbeddingConfig {
            word_dim: 512,
            char_dim: 100,
            char_emb_dim: 16,
            role_dim: 128,
            provider: ProviderKind::TrainableLookup,
        }
    }
}

/// Char CNN kernel widths.
pub const CHAR_KERNEL_WIDTHS: [usize; 3] = [2, 3, 4];

/// Splits char_dim across the three kernel widths; the remainder goes to the
/// first so the parts always sum to char_dim.
pub fn char_channel_split(char_dim: usize) -> (usize, usize, usize) {
    let base = char_dim / 3;
    (base + char_dim % 3, base, base)
}

/// Token and character vocabularies. Index 0 is the unknown entry for both.
/// Serialization preserves insertion order, so a persisted vocabulary
/// restores identical ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: IndexMap<String, usize>,
    chars: IndexMap<char, usize>,
}

pub const UNK_ID: usize = 0;

impl Vocab {
    /// Builds a vocabulary from a deterministic, sorted token universe.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocab {
        let unique: BTreeSet<String> = tokens.into_iter().filter(|t| !t.is_empty()).collect();
        let mut token_map = IndexMap::with_capacity(unique.len() + 1);
        token_map.insert("<unk>".to_string(), UNK_ID);
        let mut char_set: BTreeSet<char> = BTreeSet::new();
        for token in &unique {
            char_set.extend(token.chars());
        }
        for token in unique {
            let id = token_map.len();
            token_map.insert(token, id);
        }
        let mut char_map = IndexMap::with_capacity(char_set.len() + 1);
        char_map.insert('\u{0}', UNK_ID);
        for c in char_set {
            let id = char_map.len();
            char_map.insert(c, id);
        }
        Vocab {
            tokens: token_map,
            chars: char_map,
        }
    }

    /// Vocabulary over a corpus, ontology names/values, act inventory, and
    /// the reserved option words.
    pub fn build(corpus: &crate::corpus::Corpus, ontology: &crate::ontology::Ontology) -> Vocab {
        let mut tokens: Vec<String> = Vec::new();
        for d in &corpus.dialogues {
            for turn in &d.turns {
                tokens.extend(turn.system.iter().cloned());
                tokens.extend(turn.user.iter().cloned());
            }
        }
        for act in &corpus.act_inventory {
            tokens.extend(tokenize(act));
        }
        for key in &ontology.slots {
            tokens.extend(tokenize(&key.domain));
            tokens.extend(tokenize(&key.slot));
            for value in &ontology.values[key] {
                tokens.extend(tokenize(value));
            }
        }
        for reserved in ["none", "dont_care", "span"] {
            tokens.push(reserved.to_string());
        }
        Vocab::from_tokens(tokens)
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn char_ids(&self, token: &str) -> Vec<usize> {
        token
            .chars()
            .map(|c| self.chars.get(&c).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn char_count(&self) -> usize {
        self.chars.len()
    }
}

/// Shapes of every encoder-side parameter for [`crate::params::ParamStore::init`].
pub fn encoder_param_shapes(
    cfg: &EmbeddingConfig,
    vocab: &Vocab,
    exact_dim: usize,
) -> Vec<(String, Vec<usize>)> {
    let (c2, c3, c4) = char_channel_split(cfg.char_dim);
    let in_dim = cfg.w() + cfg.role_dim + exact_dim;
    let h = cfg.gru_hidden();
    let mut shapes = vec![
        ("embed.word".to_string(), vec![vocab.token_count(), cfg.word_dim]),
        ("embed.char".to_string(), vec![vocab.char_count(), cfg.char_emb_dim]),
        ("embed.role".to_string(), vec![2, cfg.role_dim]),
        ("char_cnn.w2".to_string(), vec![2 * cfg.char_emb_dim, c2]),
        ("char_cnn.b2".to_string(), vec![c2]),
        ("char_cnn.w3".to_string(), vec![3 * cfg.char_emb_dim, c3]),
        ("char_cnn.b3".to_string(), vec![c3]),
        ("char_cnn.w4".to_string(), vec![4 * cfg.char_emb_dim, c4]),
        ("char_cnn.b4".to_string(), vec![c4]),
    ];
    for dir in ["fwd", "bwd"] {
        for gate in ["z", "r", "n"] {
            shapes.push((format!("gru.{dir}.w_{gate}"), vec![in_dim, h]));
            shapes.push((format!("gru.{dir}.u_{gate}"), vec![h, h]));
        }
        shapes.push((format!("gru.{dir}.b_z"), vec![h]));
        shapes.push((format!("gru.{dir}.b_r"), vec![h]));
        shapes.push((format!("gru.{dir}.b_wn"), vec![h]));
        shapes.push((format!("gru.{dir}.b_un"), vec![h]));
    }
    shapes
}

/// Slot query vectors: domain embedding, slot embedding, and their sum.
#[derive(Clone, Copy, Debug)]
pub struct SlotQueryVars {
    pub domain: Var,
    pub slot: Var,
    pub query: Var,
}

/// Which word table a token's word part reads from.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flavor {
    /// Provider-backed word part (context tokens, acts).
    Context,
    /// Trainable-table word part (slot names, option values).
    Name,
}

/// One forward pass worth of embedding machinery bound to a tape.
///
/// Vectors are memoized per token and phrase, so repeated mentions share tape
/// nodes (and their gradients accumulate through the shared subgraph).
pub struct Encoder<'a, F: Real> {
    pub tape: &'a Tape<F>,
    pub cfg: &'a EmbeddingConfig,
    pub vocab: &'a Vocab,
    pub params: &'a IndexMap<String, Var>,
    cache: RefCell<HashMap<(Flavor, String), Var>>,
}

impl<'a, F: Real> Encoder<'a, F> {
    pub fn new(
        tape: &'a Tape<F>,
        cfg: &'a EmbeddingConfig,
        vocab: &'a Vocab,
        params: &'a IndexMap<String, Var>,
    ) -> Self {
        Encoder {
            tape,
            cfg,
            vocab,
            params,
            cache: RefCell::new(HashMap::new()),
        }
    }

    fn p(&self, name: &str) -> Var {
        *self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not placed on tape"))
    }

    /// Char CNN over one token: embed characters, pad to the widest kernel,
    /// convolve at widths 2/3/4 with ReLU + max-over-time, concatenate.
    /// Empty tokens embed to the zero vector.
    pub fn char_vec(&self, token: &str) -> Var {
        if let Some(&v) = self.cache.borrow().get(&(Flavor::Name, format!("c\u{1}{token}"))) {
            return v;
        }
        let ids = self.vocab.char_ids(token);
        let out = if ids.is_empty() {
            self.tape.zeros1(self.cfg.char_dim)
        } else {
            let max_width = *CHAR_KERNEL_WIDTHS.iter().max().unwrap();
            let gathered = self.tape.gather_rows(self.p("embed.char"), &ids);
            let padded = if ids.len() < max_width {
                let pad = self.tape.constant(ArrayD::zeros(IxDyn(&[
                    max_width - ids.len(),
                    self.cfg.char_emb_dim,
                ])));
                self.tape.vcat(&[gathered, pad])
            } else {
                gathered
            };
            let padded_len = ids.len().max(max_width);
            let parts: Vec<Var> = CHAR_KERNEL_WIDTHS
                .iter()
                .map(|&width| {
                    let kernel = self.p(&format!("char_cnn.w{width}"));
                    let bias = self.p(&format!("char_cnn.b{width}"));
                    // windows that start past the real characters hold only
                    // padding and are excluded from the pool
                    let valid = (padded_len - width + 1).min(ids.len());
                    self.tape.conv_relu_maxpool(padded, kernel, bias, width, valid)
                })
                .collect();
            self.tape.concat1d(&parts)
        };
        self.cache
            .borrow_mut()
            .insert((Flavor::Name, format!("c\u{1}{token}")), out);
        out
    }

    fn trainable_word_vec(&self, token: &str) -> Var {
        let id = self.vocab.token_id(token);
        let gathered = self.tape.gather_rows(self.p("embed.word"), &[id]);
        self.tape.row(gathered, 0)
    }

    fn frozen_word_vec(&self, token: &str, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(token));
        let bound = 1.0 / (self.cfg.word_dim as f64).sqrt();
        let vec = Array1::from_shape_fn(self.cfg.word_dim, |_| {
            F::from_f64(rng.random_range(-bound..bound))
        });
        self.tape.constant(vec.into_dyn())
    }

    /// Full token vector [word part; char part], memoized per flavor.
    fn token_vec(&self, token: &str, flavor: Flavor) -> Var {
        let key = (flavor, token.to_string());
        if let Some(&v) = self.cache.borrow().get(&key) {
            return v;
        }
        let word = match (flavor, &self.cfg.provider) {
            (Flavor::Name, _) | (_, ProviderKind::TrainableLookup) => {
                self.trainable_word_vec(token)
            }
            (Flavor::Context, ProviderKind::FrozenRandom { seed }) => {
                self.frozen_word_vec(token, *seed)
            }
        };
        let chars = self.char_vec(token);
        let out = self.tape.concat1d(&[word, chars]);
        self.cache.borrow_mut().insert(key, out);
        out
    }

    /// Multi-word phrases embed as the mean of their token vectors.
    pub fn phrase_vec(&self, phrase: &str, flavor: Flavor) -> Var {
        let key = (flavor, format!("p\u{1}{phrase}"));
        if let Some(&v) = self.cache.borrow().get(&key) {
            return v;
        }
        let tokens = tokenize(phrase);
        let out = match tokens.len() {
            0 => self.tape.zeros1(self.cfg.w()),
            1 => self.token_vec(&tokens[0], flavor),
            _ => {
                let rows: Vec<Var> = tokens.iter().map(|t| self.token_vec(t, flavor)).collect();
                let stacked = self.tape.stack_rows(&rows);
                self.tape.mean_rows(stacked)
            }
        };
        self.cache.borrow_mut().insert(key, out);
        out
    }

    /// Input rows for the GRU: [word; char; role; exact] per context token.
    pub fn embed_tokens(
        &self,
        tokens: &[String],
        roles: &[Role],
        exact: &Array2<u8>,
    ) -> Result<Var> {
        if tokens.len() != roles.len() || tokens.len() != exact.nrows() {
            return Err(DstError::Model(format!(
                "embed_tokens length mismatch: {} tokens, {} roles, {} exact rows",
                tokens.len(),
                roles.len(),
                exact.nrows()
            )));
        }
        let total = self.cfg.w() + self.cfg.role_dim + exact.ncols();
        if tokens.is_empty() {
            return Ok(self.tape.empty_matrix(total));
        }
        let rows: Vec<Var> = tokens
            .iter()
            .map(|t| self.token_vec(t, Flavor::Context))
            .collect();
        let token_mat = self.tape.stack_rows(&rows);
        let role_ids: Vec<usize> = roles
            .iter()
            .map(|r| match r {
                Role::Sys => 0,
                Role::User => 1,
            })
            .collect();
        let role_mat = self.tape.gather_rows(self.p("embed.role"), &role_ids);
        let exact_mat = self
            .tape
            .constant(exact.mapv(|b| F::from_f64(b as f64)).into_dyn());
        Ok(self.tape.hcat(&[token_mat, role_mat, exact_mat]))
    }

    fn gru_cell(&self, prefix: &str, x: Var, h: Var) -> Var {
        let t = self.tape;
        let wz = self.p(&format!("{prefix}.w_z"));
        let uz = self.p(&format!("{prefix}.u_z"));
        let bz = self.p(&format!("{prefix}.b_z"));
        let wr = self.p(&format!("{prefix}.w_r"));
        let ur = self.p(&format!("{prefix}.u_r"));
        let br = self.p(&format!("{prefix}.b_r"));
        let wn = self.p(&format!("{prefix}.w_n"));
        let un = self.p(&format!("{prefix}.u_n"));
        let bwn = self.p(&format!("{prefix}.b_wn"));
        let bun = self.p(&format!("{prefix}.b_un"));
        let z = t.sigmoid(t.add(t.add(t.vecmat(x, wz), t.vecmat(h, uz)), bz));
        let r = t.sigmoid(t.add(t.add(t.vecmat(x, wr), t.vecmat(h, ur)), br));
        let n_inner = t.mul(r, t.add(t.vecmat(h, un), bun));
        let n = t.tanh(t.add(t.add(t.vecmat(x, wn), bwn), n_inner));
        let one_minus_z = t.sub(t.constant(ArrayD::ones(IxDyn(&[self.cfg.gru_hidden()]))), z);
        t.add(t.mul(one_minus_z, n), t.mul(z, h))
    }

    /// One-layer BiGRU; output row i concatenates the forward state after
    /// token i with the backward state after token i (scanning from the end).
    pub fn encode_context(&self, input: Var) -> Var {
        let shape = self.tape.shape(input);
        let n = shape[0];
        if n == 0 {
            return self.tape.empty_matrix(self.cfg.w());
        }
        let h = self.cfg.gru_hidden();
        let mut fwd = Vec::with_capacity(n);
        let mut state = self.tape.zeros1(h);
        for i in 0..n {
            let x = self.tape.row(input, i);
            state = self.gru_cell("gru.fwd", x, state);
            fwd.push(state);
        }
        let mut bwd = Vec::with_capacity(n);
        state = self.tape.zeros1(h);
        for i in (0..n).rev() {
            let x = self.tape.row(input, i);
            state = self.gru_cell("gru.bwd", x, state);
            bwd.push(state);
        }
        bwd.reverse();
        let rows: Vec<Var> = (0..n)
            .map(|i| self.tape.concat1d(&[fwd[i], bwd[i]]))
            .collect();
        self.tape.stack_rows(&rows)
    }

    /// One w-dimensional row per act occurrence, in sequence order.
    pub fn embed_acts(&self, acts: &[ActRef], inventory: &[String]) -> Result<Var> {
        if acts.is_empty() {
            return Ok(self.tape.empty_matrix(self.cfg.w()));
        }
        let rows: Vec<Var> = acts
            .iter()
            .map(|act| {
                if !inventory.iter().any(|a| a == &act.name) {
                    return Err(DstError::Model(format!(
                        "act {:?} not in the inventory",
                        act.name
                    )));
                }
                Ok(self.phrase_vec(&act.name, Flavor::Context))
            })
            .collect::<Result<_>>()?;
        Ok(self.tape.stack_rows(&rows))
    }

    /// q^d and q^s from trainable name embeddings; query = q^d + q^s.
    pub fn embed_slot_query(&self, key: &SlotKey) -> SlotQueryVars {
        let domain = self.phrase_vec(&key.domain, Flavor::Name);
        let slot = self.phrase_vec(&key.slot, Flavor::Name);
        SlotQueryVars {
            domain,
            slot,
            query: self.tape.add(domain, slot),
        }
    }

    /// Option matrix for a categorical slot: row i = query + value embedding.
    pub fn embed_options(&self, query: Var, options: &[String]) -> Result<Var> {
        if options.is_empty() {
            return Err(DstError::Model("empty option list".to_string()));
        }
        let rows: Vec<Var> = options
            .iter()
            .map(|opt| self.tape.add(query, self.phrase_vec(opt, Flavor::Name)))
            .collect();
        Ok(self.tape.stack_rows(&rows))
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn small_cfg(provider: ProviderKind) -> EmbeddingConfig {
        EmbeddingConfig {
            word_dim: 8,
            char_dim: 6,
            char_emb_dim: 5,
            role_dim: 4,
            provider,
        }
    }

    fn small_vocab() -> Vocab {
        Vocab::from_tokens(
            [
                "hi", "there", "train", "to", "cambridge", "20:45", "inform", "request", "hotel",
                "parking", "yes", "no", "none", "dont_care", "span", "book", "time", "a",
            ]
            .iter()
            .map(|s| s.to_string()),
        )
    }

    fn setup<F: Real>(
        provider: ProviderKind,
        exact_dim: usize,
        seed: u64,
    ) -> (Tape<F>, EmbeddingConfig, Vocab, IndexMap<String, Var>) {
        let cfg = small_cfg(provider);
        cfg.validate().unwrap();
        let vocab = small_vocab();
        let shapes = encoder_param_shapes(&cfg, &vocab, exact_dim);
        let store: ParamStore<F> = ParamStore::init(&shapes, seed);
        let tape = Tape::new();
        let params = store.place_on(&tape);
        (tape, cfg, vocab, params)
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn embed_tokens_concatenates_all_blocks() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 3, 1);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let tokens = strs(&["hi", "hi"]);
        let roles = vec![Role::Sys, Role::User];
        let exact = Array2::<u8>::zeros((2, 3));
        let m = enc.embed_tokens(&tokens, &roles, &exact).unwrap();
        assert_eq!(tape.shape(m), vec![2, cfg.w() + cfg.role_dim + 3]);
        let v = tape.value(m);
        // identical tokens with different roles differ only in the role block
        let w = cfg.w();
        for j in 0..w {
            assert_eq!(v[[0, j]], v[[1, j]]);
        }
        let role_block: Vec<f64> = (w..w + cfg.role_dim).map(|j| v[[0, j]] - v[[1, j]]).collect();
        assert!(role_block.iter().any(|d| d.abs() > 1e-12));
        for j in w + cfg.role_dim..w + cfg.role_dim + 3 {
            assert_eq!(v[[0, j]], v[[1, j]]);
        }
    }

    #[test]
    fn embed_tokens_full_scale_row_width() {
        let cfg = EmbeddingConfig::full_scale();
        let vocab = Vocab::from_tokens(["hi".to_string()]);
        let shapes = encoder_param_shapes(&cfg, &vocab, 1);
        let store: ParamStore<f64> = ParamStore::init(&shapes, 2);
        let tape: Tape<f64> = Tape::new();
        let params = store.place_on(&tape);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let m = enc
            .embed_tokens(&strs(&["hi"]), &[Role::User], &Array2::zeros((1, 1)))
            .unwrap();
        assert_eq!(tape.shape(m), vec![1, 741]);
    }

    #[test]
    fn embed_tokens_empty_context_and_mismatch() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 2, 1);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let m = enc
            .embed_tokens(&[], &[], &Array2::zeros((0, 2)))
            .unwrap();
        assert_eq!(tape.shape(m), vec![0, cfg.w() + cfg.role_dim + 2]);
        assert!(enc
            .embed_tokens(&strs(&["hi"]), &[], &Array2::zeros((1, 2)))
            .is_err());
    }

    #[test]
    fn char_cnn_is_pure_and_handles_short_tokens() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 1, 3);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let a = enc.char_vec("cambridge");
        assert_eq!(tape.shape(a), vec![cfg.char_dim]);
        let b = enc.char_vec("cambridge");
        assert_eq!(a, b, "memoized lookup returns the same node");
        let single = enc.char_vec("a");
        assert_eq!(tape.shape(single), vec![cfg.char_dim]);
        let empty = enc.char_vec("");
        assert!(tape.vec_value(empty).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_context_shapes_and_empty() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 1, 4);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let tokens = strs(&["hi", "there", "train", "to", "cambridge", "20:45", "yes"]);
        let roles = vec![Role::User; 7];
        let exact = Array2::<u8>::zeros((7, 1));
        let input = enc.embed_tokens(&tokens, &roles, &exact).unwrap();
        let x = enc.encode_context(input);
        assert_eq!(tape.shape(x), vec![7, cfg.w()]);
        let empty = enc.encode_context(tape.empty_matrix(cfg.w() + cfg.role_dim + 1));
        assert_eq!(tape.shape(empty), vec![0, cfg.w()]);
    }

    #[test]
    fn encode_context_reversal_swaps_direction_halves() {
        // with tied direction parameters, reversing the input mirrors the halves
        let cfg = small_cfg(ProviderKind::TrainableLookup);
        let vocab = small_vocab();
        let shapes = encoder_param_shapes(&cfg, &vocab, 0);
        let mut store: ParamStore<f64> = ParamStore::init(&shapes, 5);
        let fwd_names: Vec<String> = store
            .values
            .keys()
            .filter(|k| k.starts_with("gru.fwd."))
            .cloned()
            .collect();
        for name in fwd_names {
            let tied = store.values[&name].clone();
            store
                .values
                .insert(name.replace("gru.fwd.", "gru.bwd."), tied);
        }
        let tape: Tape<f64> = Tape::new();
        let params = store.place_on(&tape);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let in_dim = cfg.w() + cfg.role_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array2::<f64>::from_shape_fn((5, in_dim), |_| rng.random_range(-1.0..1.0));
        let mut rev = a.clone();
        for i in 0..5 {
            rev.row_mut(i).assign(&a.row(4 - i));
        }
        let x = enc.encode_context(tape.constant(a.into_dyn()));
        let y = enc.encode_context(tape.constant(rev.into_dyn()));
        let (xv, yv) = (tape.value(x), tape.value(y));
        let h = cfg.gru_hidden();
        for i in 0..5 {
            for j in 0..h {
                let fwd_rev = yv[[i, j]];
                let bwd_orig = xv[[4 - i, h + j]];
                assert!((fwd_rev - bwd_orig).abs() < 1e-12);
                let bwd_rev = yv[[i, h + j]];
                let fwd_orig = xv[[4 - i, j]];
                assert!((bwd_rev - fwd_orig).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_acts_rows_and_errors() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 1, 6);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let inventory = strs(&["Inform", "Request"]);
        let acts = vec![
            ActRef { name: "Inform".to_string(), turn: 1 },
            ActRef { name: "Request".to_string(), turn: 1 },
            ActRef { name: "Inform".to_string(), turn: 2 },
        ];
        let m = enc.embed_acts(&acts, &inventory).unwrap();
        assert_eq!(tape.shape(m), vec![3, cfg.w()]);
        let v = tape.value(m);
        for j in 0..cfg.w() {
            assert_eq!(v[[0, j]], v[[2, j]], "repeated act names embed identically");
        }
        let empty = enc.embed_acts(&[], &inventory).unwrap();
        assert_eq!(tape.shape(empty), vec![0, cfg.w()]);
        let bad = vec![ActRef { name: "Barter".to_string(), turn: 1 }];
        assert!(enc.embed_acts(&bad, &inventory).is_err());
    }

    #[test]
    fn slot_query_is_additive_and_shares_domain() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 1, 7);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let q1 = enc.embed_slot_query(&SlotKey::new("hotel", "parking"));
        let q2 = enc.embed_slot_query(&SlotKey::new("hotel", "book time"));
        assert_eq!(tape.shape(q1.query), vec![cfg.w()]);
        assert_eq!(
            tape.vec_value(q1.domain),
            tape.vec_value(q2.domain),
            "same domain shares q^d"
        );
        let query = tape.vec_value(q1.query);
        let qd = tape.vec_value(q1.domain);
        let qs = tape.vec_value(q1.slot);
        for i in 0..cfg.w() {
            assert!((query[i] - qd[i] - qs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_word_names_average_token_vectors() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 1, 8);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let phrase = enc.phrase_vec("book time", Flavor::Name);
        let book = enc.token_vec("book", Flavor::Name);
        let time = enc.token_vec("time", Flavor::Name);
        let (pv, bv, tv) = (
            tape.vec_value(phrase),
            tape.vec_value(book),
            tape.vec_value(time),
        );
        for i in 0..cfg.w() {
            assert!((pv[i] - (bv[i] + tv[i]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn option_rows_reconstruct_query_plus_value() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 1, 9);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let q = enc.embed_slot_query(&SlotKey::new("hotel", "parking"));
        let options = strs(&["yes", "no", "none", "dont_care"]);
        let p_e = enc.embed_options(q.query, &options).unwrap();
        assert_eq!(tape.shape(p_e), vec![4, cfg.w()]);
        let pv = tape.value(p_e);
        let qv = tape.vec_value(q.query);
        for (i, opt) in options.iter().enumerate() {
            let wv = tape.vec_value(enc.phrase_vec(opt, Flavor::Name));
            for j in 0..cfg.w() {
                assert!((pv[[i, j]] - qv[j] - wv[j]).abs() < 1e-12);
            }
        }
        assert!(enc.embed_options(q.query, &[]).is_err());
    }

    #[test]
    fn frozen_provider_blocks_gradients_to_word_table() {
        let (tape, cfg, vocab, params) =
            setup::<f64>(ProviderKind::FrozenRandom { seed: 42 }, 1, 10);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let tokens = strs(&["hi", "there"]);
        let input = enc
            .embed_tokens(&tokens, &[Role::User, Role::User], &Array2::zeros((2, 1)))
            .unwrap();
        let x = enc.encode_context(input);
        let loss = tape.sum_vec(tape.row(x, 0));
        let grads = tape.backward(loss);
        assert!(
            grads.get(params["embed.word"]).is_none(),
            "frozen provider must not feed the trainable word table"
        );
        assert!(
            grads.get(params["embed.char"]).is_some(),
            "char CNN path stays trainable"
        );
    }

    #[test]
    fn frozen_vectors_are_deterministic_per_token() {
        let (tape, cfg, vocab, params) =
            setup::<f64>(ProviderKind::FrozenRandom { seed: 42 }, 1, 11);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let a = enc.frozen_word_vec("cambridge", 42);
        let b = enc.frozen_word_vec("cambridge", 42);
        let c = enc.frozen_word_vec("london", 42);
        assert_eq!(tape.vec_value(a), tape.vec_value(b));
        assert_ne!(tape.vec_value(a), tape.vec_value(c));
        let _ = (cfg, vocab, params);
    }

    #[test]
    fn trainable_provider_feeds_word_table_gradients() {
        let (tape, cfg, vocab, params) = setup::<f64>(ProviderKind::TrainableLookup, 1, 12);
        let enc = Encoder::new(&tape, &cfg, &vocab, &params);
        let input = enc
            .embed_tokens(&strs(&["hi"]), &[Role::User], &Array2::zeros((1, 1)))
            .unwrap();
        let x = enc.encode_context(input);
        let loss = tape.sum_vec(tape.row(x, 0));
        let grads = tape.backward(loss);
        assert!(grads.get(params["embed.word"]).is_some());
        let _ = cfg;
    }

    #[test]
    fn channel_split_sums_to_char_dim() {
        assert_eq!(char_channel_split(100), (34, 33, 33));
        assert_eq!(char_channel_split(6), (2, 2, 2));
        assert_eq!(char_channel_split(7), (3, 2, 2));
        for d in 3..40 {
            let (a, b, c) = char_channel_split(d);
            assert_eq!(a + b + c, d);
        }
    }

    #[test]
    fn vocab_is_deterministic_with_unk_zero() {
        let v1 = small_vocab();
        let v2 = small_vocab();
        assert_eq!(v1, v2);
        assert_eq!(v1.token_id("never-seen"), UNK_ID);
        assert_ne!(v1.token_id("hi"), UNK_ID);
        assert!(v1.char_ids("hi").iter().all(|&c| c != UNK_ID));
        assert_eq!(v1.char_ids("€"), vec![UNK_ID]);
    }
}
