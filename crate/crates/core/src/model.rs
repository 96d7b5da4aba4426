//! Patch-transformer encoder-decoder.
//!
//! The encoder turns a fused question+page patch grid into the contextual
//! feature sequence consumed by both the answer decoder and the page scorer.
//! The decoder is a character-level transformer with cross-attention over
//! that feature, decoded greedily.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{ensure_finite, fan_in_init, Attention, FeedForward, Linear, Norm, SelfAttentionBlock};
use crate::params::{Bound, GradSet, Init, ParamId, ParamSet, ParamSpec};
use crate::render::{InputLayout, PatchGrid};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parameter namespace of the encoder-decoder inside checkpoints.
pub const MODEL_NAMESPACE: &str = "model";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Standard deviation of the learned position tables at initialization.
/// Small next to the patch projection, so glyph content rather than
/// position dominates the initial token geometry.
pub const POSITION_INIT_STD: f64 = 0.1;

/// Character vocabulary. Ids 0..3 are PAD, BOS and EOS; characters follow
/// in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(symbols: &str) -> Result<Self> {
        let chars: Vec<char> = symbols.chars().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Config(format!("vocabulary lists {c:?} twice")));
            }
        }
        Ok(Vocab { chars })
    }

    /// Every printable 7-bit character.
    pub fn printable_ascii() -> Self {
        Vocab {
            chars: (0x20u8..=0x7e).map(char::from).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn token_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + SPECIALS)
    }

    pub fn char_of(&self, token: usize) -> Option<char> {
        token.checked_sub(SPECIALS).and_then(|i| self.chars.get(i)).copied()
    }

    /// Tokenizes `text` and appends EOS.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut tokens = Vec::with_capacity(text.len() + 1);
        for c in text.chars() {
            tokens.push(
                self.token_of(c)
                    .ok_or_else(|| Error::Contract(format!("character {c:?} is not in the vocabulary")))?,
            );
        }
        tokens.push(EOS);
        Ok(TokenSeq { tokens })
    }

    /// Characters of `tokens`, skipping specials.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().filter_map(|&t| self.char_of(t)).collect()
    }
}

impl TryFrom<String> for Vocab {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Vocab::new(&value)
    }
}

impl From<Vocab> for String {
    fn from(v: Vocab) -> String {
        v.symbols()
    }
}

/// Token ids of a decoder target. At most one EOS, and only at the end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<usize>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Contract(format!("token {bad} outside vocabulary of {}", vocab.len())));
        }
        if let Some(p) = tokens.iter().position(|&t| t == EOS) {
            if p + 1 != tokens.len() {
                return Err(Error::Contract("EOS must terminate the sequence".into()));
            }
        }
        Ok(TokenSeq { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub patch_size: usize,
    pub max_patches: usize,
    pub vocab: Vocab,
    pub max_answer_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            patch_size: 16,
            max_patches: 2048,
            vocab: Vocab::printable_ascii(),
            max_answer_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("encoder and decoder need at least one layer each".into());
        }
        if self.d_ff == 0 || self.patch_size == 0 || self.max_patches == 0 || self.max_answer_len == 0 {
            return fail("d_ff, patch_size, max_patches and max_answer_len must be positive".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> InputLayout {
        InputLayout {
            patch_size: self.patch_size,
            max_patches: self.max_patches,
        }
    }

    /// Declared tensors of the encoder-decoder, in checkpoint order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let ns = MODEL_NAMESPACE;
        let emb = Init::Normal(0.5);
        let pos = Init::Normal(POSITION_INIT_STD);
        let mut s = Linear::specs(&format!("{ns}.patch_proj"), self.patch_size * self.patch_size, d);
        s.push(ParamSpec::new(format!("{ns}.row_emb"), self.max_patches, d, pos));
        s.push(ParamSpec::new(format!("{ns}.col_emb"), self.max_patches, d, pos));
        for i in 0..self.n_enc_layers {
            s.extend(SelfAttentionBlock::specs(&format!("{ns}.enc.{i}"), d, self.d_ff));
        }
        s.extend(Norm::specs(&format!("{ns}.enc.ln_f"), d));
        s.push(ParamSpec::new(format!("{ns}.tok_emb"), self.vocab.len(), d, emb));
        s.push(ParamSpec::new(format!("{ns}.dec_pos"), self.max_answer_len + 1, d, pos));
        for i in 0..self.n_dec_layers {
            let p = format!("{ns}.dec.{i}");
            s.extend(Norm::specs(&format!("{p}.ln1"), d));
            s.extend(Attention::specs(&format!("{p}.self_attn"), d));
            s.extend(Norm::specs(&format!("{p}.ln2"), d));
            s.extend(Attention::specs(&format!("{p}.cross_attn"), d));
            s.extend(Norm::specs(&format!("{p}.ln3"), d));
            s.extend(FeedForward::specs(&format!("{p}.ff"), d, self.d_ff));
        }
        s.extend(Norm::specs(&format!("{ns}.dec.ln_f"), d));
        s.push(ParamSpec::new(format!("{ns}.out.w"), d, self.vocab.len(), fan_in_init(d)));
        s.push(ParamSpec::new(format!("{ns}.out.b"), 1, self.vocab.len(), Init::Zeros));
        s
    }
}

/// Sets the patch-projection bias so that an all-white patch embeds to the
/// zero vector. Patches are mostly background, so without this every token
/// would share one large common component and glyph differences would be
/// a small perturbation on top of it.
fn zero_blank_patch<T: Scalar>(params: &mut ParamSet<T>) {
    let w = params
        .by_name(&format!("{MODEL_NAMESPACE}.patch_proj.w"))
        .expect("patch projection is declared")
        .clone();
    let b = params
        .by_name_mut(&format!("{MODEL_NAMESPACE}.patch_proj.b"))
        .expect("patch projection is declared");
    for (c, out) in b.data_mut().iter_mut().enumerate() {
        *out = (0..w.rows()).fold(T::zero(), |acc, r| acc - w.get(r, c));
    }
}

/// Contextual vectors of one question+page input, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFeature<T> {
    vectors: Matrix<T>,
}

impl<T: Scalar> EncoderFeature<T> {
    pub fn new(vectors: Matrix<T>) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::Contract("encoder feature must be non-empty".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::numeric("encoder feature"));
        }
        Ok(EncoderFeature { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn into_vectors(self) -> Matrix<T> {
        self.vectors
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct ModelIds {
    patch_proj: Linear,
    row_emb: ParamId,
    col_emb: ParamId,
    enc: Vec<SelfAttentionBlock>,
    enc_ln: Norm,
    tok_emb: ParamId,
    dec_pos: ParamId,
    dec: Vec<DecoderLayer>,
    dec_ln: Norm,
    out: Linear,
}

impl ModelIds {
    fn resolve<T: Scalar>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        let ns = MODEL_NAMESPACE;
        let id = |name: String| {
            params.id(&name).ok_or(Error::Checkpoint {
                entry: name,
                message: "missing tensor".into(),
            })
        };
        let enc = (0..cfg.n_enc_layers)
            .map(|i| SelfAttentionBlock::resolve(params, &format!("{ns}.enc.{i}")))
            .collect::<Result<_>>()?;
        let dec = (0..cfg.n_dec_layers)
            .map(|i| {
                let p = format!("{ns}.dec.{i}");
                Ok(DecoderLayer {
                    ln_self: Norm::resolve(params, &format!("{p}.ln1"))?,
                    self_attn: Attention::resolve(params, &format!("{p}.self_attn"))?,
                    ln_cross: Norm::resolve(params, &format!("{p}.ln2"))?,
                    cross_attn: Attention::resolve(params, &format!("{p}.cross_attn"))?,
                    ln_ff: Norm::resolve(params, &format!("{p}.ln3"))?,
                    ff: FeedForward::resolve(params, &format!("{p}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelIds {
            patch_proj: Linear::resolve(params, &format!("{ns}.patch_proj"))?,
            row_emb: id(format!("{ns}.row_emb"))?,
            col_emb: id(format!("{ns}.col_emb"))?,
            enc,
            enc_ln: Norm::resolve(params, &format!("{ns}.enc.ln_f"))?,
            tok_emb: id(format!("{ns}.tok_emb"))?,
            dec_pos: id(format!("{ns}.dec_pos"))?,
            dec,
            dec_ln: Norm::resolve(params, &format!("{ns}.dec.ln_f"))?,
            out: Linear::resolve(params, &format!("{ns}.out"))?,
        })
    }
}

/// The single-page question-answering network.
#[derive(Debug, Clone)]
pub struct VqaModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    ids: ModelIds,
}

impl<T: Scalar> VqaModel<T> {
    /// Freshly initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::initialize(&config.param_specs(), config.seed);
        zero_blank_patch(&mut params);
        Self::from_params(config, params)
    }

    /// Wraps existing tensors, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let params = params.conform(&config.param_specs())?;
        let ids = ModelIds::resolve(&config, &params)?;
        Ok(VqaModel { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    /// Patch projection plus learned row and column embeddings, on `tape`.
    pub fn embed_on<'a>(&'a self, tape: &mut Tape<'a, T>, bound: &Bound, grid: &PatchGrid<T>) -> Result<Var> {
        if grid.len() > self.config.max_patches {
            return Err(Error::BudgetViolation {
                patches: grid.len(),
                max: self.config.max_patches,
            });
        }
        if grid.patch_size() != self.config.patch_size {
            return Err(Error::Contract(format!(
                "grid patch size {} differs from model patch size {}",
                grid.patch_size(),
                self.config.patch_size
            )));
        }
        if grid.is_empty() {
            return Err(Error::Contract("empty patch grid".into()));
        }
        let x = tape.constant(Matrix::from_vec(grid.len(), grid.patch_dim(), grid.values().to_vec()));
        let proj = self.ids.patch_proj.forward(tape, bound, x);
        let (rows, cols): (Vec<usize>, Vec<usize>) = (0..grid.len()).map(|i| grid.position(i)).unzip();
        let re = tape.gather_rows(bound.var(self.ids.row_emb), &rows);
        let ce = tape.gather_rows(bound.var(self.ids.col_emb), &cols);
        let pos = tape.add(re, ce);
        Ok(tape.add(proj, pos))
    }

    /// Encoder stack over embedded patches, ending in a final normalization.
    pub fn encode_on(&self, tape: &mut Tape<'_, T>, bound: &Bound, embeddings: Var) -> Result<Var> {
        if tape.value(embeddings).rows() == 0 {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        ensure_finite(tape, embeddings, || "patch embedding".into())?;
        let mut x = embeddings;
        for (i, layer) in self.ids.enc.iter().enumerate() {
            x = layer.forward(tape, bound, x, self.config.n_heads);
            ensure_finite(tape, x, || format!("encoder layer {i}"))?;
        }
        let f = self.ids.enc_ln.forward(tape, bound, x);
        ensure_finite(tape, f, || "encoder final norm".into())?;
        Ok(f)
    }

    /// Decoder logits (one row per input token) given encoder output `memory`.
    pub fn decoder_logits_on(&self, tape: &mut Tape<'_, T>, bound: &Bound, memory: Var, inputs: &[usize]) -> Result<Var> {
        if inputs.is_empty() || inputs.len() > self.config.max_answer_len + 1 {
            return Err(Error::Contract(format!(
                "decoder input length {} outside 1..={}",
                inputs.len(),
                self.config.max_answer_len + 1
            )));
        }
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let tok = tape.gather_rows(bound.var(self.ids.tok_emb), inputs);
        let pos = tape.gather_rows(bound.var(self.ids.dec_pos), &positions);
        let mut x = tape.add(tok, pos);
        let heads = self.config.n_heads;
        for (i, layer) in self.ids.dec.iter().enumerate() {
            let n = layer.ln_self.forward(tape, bound, x);
            let a = layer.self_attn.forward(tape, bound, n, n, heads, true);
            x = tape.add(x, a);
            let n = layer.ln_cross.forward(tape, bound, x);
            let c = layer.cross_attn.forward(tape, bound, n, memory, heads, false);
            x = tape.add(x, c);
            let n = layer.ln_ff.forward(tape, bound, x);
            let f = layer.ff.forward(tape, bound, n);
            x = tape.add(x, f);
            ensure_finite(tape, x, || format!("decoder layer {i}"))?;
        }
        let n = self.ids.dec_ln.forward(tape, bound, x);
        Ok(self.ids.out.forward(tape, bound, n))
    }

    /// Embeds a grid without running the encoder (evaluation mode).
    pub fn embed_patches(&self, grid: &PatchGrid<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = self.embed_on(&mut tape, &bound, grid)?;
        Ok(tape.value(x).clone())
    }

    /// Runs the encoder on precomputed embeddings (evaluation mode).
    pub fn encode_embeddings(&self, embeddings: &Matrix<T>) -> Result<EncoderFeature<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(embeddings.clone());
        let f = self.encode_on(&mut tape, &bound, x)?;
        EncoderFeature::new(tape.value(f).clone())
    }

    /// Embeds and encodes a patch grid (evaluation mode).
    pub fn encode(&self, grid: &PatchGrid<T>) -> Result<EncoderFeature<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = self.embed_on(&mut tape, &bound, grid)?;
        let f = self.encode_on(&mut tape, &bound, x)?;
        EncoderFeature::new(tape.value(f).clone())
    }

    /// Greedy decoding from BOS until EOS or `max_len` characters. PAD and
    /// BOS are never emitted; ties go to the lowest token id.
    pub fn generate_answer(&self, feature: &EncoderFeature<T>, max_len: usize) -> Result<String> {
        let max_len = max_len.min(self.config.max_answer_len);
        let mut tokens = vec![BOS];
        while tokens.len() <= max_len {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let memory = tape.constant(feature.vectors.clone());
            let logits = self.decoder_logits_on(&mut tape, &bound, memory, &tokens)?;
            let last = tape.value(logits).row(tokens.len() - 1);
            let next = argmax_excluding(last, &[PAD, BOS]);
            if next == EOS {
                break;
            }
            tokens.push(next);
        }
        Ok(self.config.vocab.decode(&tokens[1..]))
    }

    fn check_target(&self, target: &TokenSeq) -> Result<()> {
        match target.tokens.last() {
            None => Err(Error::Contract("empty decoder target".into())),
            Some(&t) if t != EOS => Err(Error::Contract("decoder target must end with EOS".into())),
            _ => Ok(()),
        }
    }

    /// Teacher-forced mean token cross-entropy on `tape`.
    pub fn vqa_loss_on(&self, tape: &mut Tape<'_, T>, bound: &Bound, memory: Var, target: &TokenSeq) -> Result<Var> {
        self.check_target(target)?;
        let mut inputs = Vec::with_capacity(target.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&target.tokens[..target.len() - 1]);
        let logits = self.decoder_logits_on(tape, bound, memory, &inputs)?;
        Ok(tape.cross_entropy(logits, &target.tokens))
    }

    /// Mean token cross-entropy of `target` given a fixed encoder feature.
    pub fn vqa_loss(&self, feature: &EncoderFeature<T>, target: &TokenSeq) -> Result<T> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let memory = tape.constant(feature.vectors.clone());
        let loss = self.vqa_loss_on(&mut tape, &bound, memory, target)?;
        Ok(tape.value(loss).item())
    }

    /// Loss of one (grid, target) pair and the gradient of every model tensor.
    pub fn loss_and_gradients(&self, grid: &PatchGrid<T>, target: &TokenSeq) -> Result<(T, GradSet<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = self.embed_on(&mut tape, &bound, grid)?;
        let f = self.encode_on(&mut tape, &bound, x)?;
        let loss = self.vqa_loss_on(&mut tape, &bound, f, target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::numeric("answer loss"));
        }
        let mut grads = tape.backward(loss);
        let g = bound.collect(&self.params, &mut grads)?;
        Ok((value, g))
    }
}

/// Index of the largest entry, ignoring `skip`; ties go to the lowest index.
pub(crate) fn argmax_excluding<T: Scalar>(row: &[T], skip: &[usize]) -> usize {
    let mut best = None;
    for (i, &v) in row.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{patchify, RasterImage};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            patch_size: 4,
            max_patches: 16,
            vocab: Vocab::new("abcdefghi").unwrap(),
            max_answer_len: 6,
            seed: 3,
        }
    }

    fn grid(w: usize, h: usize, p: usize) -> PatchGrid<f64> {
        let pixels = (0..w * h).map(|i| ((i * 37) % 256) as u8).collect();
        patchify(&RasterImage::from_pixels(w, h, pixels).unwrap(), p)
    }

    #[test]
    fn vocab_has_specials_once() {
        let v = Vocab::new("abc").unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.encode("cab").unwrap().tokens(), &[5, 3, 4, EOS]);
        assert_eq!(v.decode(&[BOS, 5, 3, EOS]), "ca");
        assert!(Vocab::new("aba").is_err());
        assert!(v.encode("z").is_err());
    }

    #[test]
    fn token_seq_rejects_inner_eos() {
        let v = Vocab::new("ab").unwrap();
        assert!(TokenSeq::new(vec![3, EOS, 4], &v).is_err());
        assert!(TokenSeq::new(vec![9], &v).is_err());
        assert!(TokenSeq::new(vec![3, 4, EOS], &v).is_ok());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..tiny_config()
        };
        assert!(matches!(VqaModel::<f64>::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_shape() {
        let model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let e = model.embed_patches(&grid(8, 8, 4)).unwrap();
        assert_eq!(e.shape(), (4, 8));
    }

    #[test]
    fn zero_parameters_embed_to_zero() {
        let mut model = VqaModel::<f64>::new(tiny_config()).unwrap();
        for m in model.params_mut().values_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let e = model.embed_patches(&grid(8, 8, 4)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_embedding() {
        let cfg = ModelConfig {
            d_model: 2,
            n_heads: 1,
            patch_size: 2,
            max_patches: 2,
            d_ff: 2,
            ..tiny_config()
        };
        let mut model = VqaModel::<f64>::new(cfg).unwrap();
        let p = model.params_mut();
        *p.by_name_mut("model.patch_proj.w").unwrap() =
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]);
        *p.by_name_mut("model.patch_proj.b").unwrap() = Matrix::row_vector(vec![0.1, -0.2]);
        *p.by_name_mut("model.row_emb").unwrap() = Matrix::from_rows(&[vec![0.3, 0.4], vec![9.0, 9.0]]);
        *p.by_name_mut("model.col_emb").unwrap() = Matrix::from_rows(&[vec![-0.5, 1.0], vec![9.0, 9.0]]);
        // one 2x2 patch with intensities 0, 51, 102, 255 -> 0, 0.2, 0.4, 1.0
        let img = RasterImage::from_pixels(2, 2, vec![0, 51, 102, 255]).unwrap();
        let g: PatchGrid<f64> = patchify(&img, 2);
        let e = model.embed_patches(&g).unwrap();
        // x·W = [0 + 0 + 0.8 + 0.5, 0 + 0.2 - 0.4 + 0.5] = [1.3, 0.3]
        let expect = [1.3 + 0.1 + 0.3 - 0.5, 0.3 - 0.2 + 0.4 + 1.0];
        for (a, b) in e.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn grid_over_budget_is_rejected() {
        let model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let err = model.encode(&grid(20, 16, 4)).unwrap_err();
        assert!(matches!(err, Error::BudgetViolation { patches: 20, max: 16 }));
    }

    #[test]
    fn encode_preserves_length_and_is_deterministic() {
        let model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let g = grid(12, 8, 4);
        let a = model.encode(&g).unwrap();
        let b = model.encode(&g).unwrap();
        assert_eq!(a.len(), g.len());
        assert_eq!(a, b);
        let again = VqaModel::<f64>::new(tiny_config()).unwrap();
        assert_eq!(again.params(), model.params());
        assert_eq!(again.encode(&g).unwrap(), a);
    }

    #[test]
    fn non_finite_input_names_stage() {
        let model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let mut e = Matrix::filled(3, 8, 0.5);
        e.set(1, 2, f64::NAN);
        match model.encode_embeddings(&e) {
            Err(Error::NumericFailure { stage }) => assert_eq!(stage, "patch embedding"),
            other => panic!("{other:?}"),
        }
        let mut big = Matrix::filled(3, 8, 0.5);
        big.set(0, 0, f64::MAX);
        big.set(0, 1, f64::MAX);
        assert!(matches!(
            model.encode_embeddings(&big),
            Err(Error::NumericFailure { stage }) if stage.starts_with("encoder layer 0")
        ));
    }

    /// Single layer, single head, width 2: rebuilt by hand with plain
    /// arithmetic. Every projection is identity-like so the result can be
    /// followed step by step.
    #[test]
    fn hand_evaluated_encoder_layer() {
        let cfg = ModelConfig {
            d_model: 2,
            n_heads: 1,
            d_ff: 2,
            ..tiny_config()
        };
        let mut model = VqaModel::<f64>::new(cfg).unwrap();
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zero_row = Matrix::row_vector(vec![0.0, 0.0]);
        let p = model.params_mut();
        for name in ["q", "k", "v", "o"] {
            *p.by_name_mut(&format!("model.enc.0.attn.{name}.w")).unwrap() = eye.clone();
            *p.by_name_mut(&format!("model.enc.0.attn.{name}.b")).unwrap() = zero_row.clone();
        }
        *p.by_name_mut("model.enc.0.ff.up.w").unwrap() = Matrix::filled(2, 2, 0.0);
        *p.by_name_mut("model.enc.0.ff.down.w").unwrap() = Matrix::filled(2, 2, 0.0);
        *p.by_name_mut("model.enc.0.ff.down.b").unwrap() = Matrix::row_vector(vec![0.25, -0.25]);

        let x = [[3.0, 1.0], [0.0, 2.0]];
        let f = model.encode_embeddings(&Matrix::from_rows(&[x[0].to_vec(), x[1].to_vec()])).unwrap();

        // width-2 layer norm maps any row with a != b to ±1
        let ln = |r: [f64; 2]| {
            let m = (r[0] + r[1]) / 2.0;
            let v = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
            let s = (v + 1e-10).sqrt();
            [(r[0] - m) / s, (r[1] - m) / s]
        };
        let n = [ln(x[0]), ln(x[1])];
        let scale = 1.0 / 2f64.sqrt();
        let mut h = [[0.0; 2]; 2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (n[i][0] * n[j][0] + n[i][1] * n[j][1]) * scale).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            let w: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
            for c in 0..2 {
                h[i][c] = x[i][c] + w[0] * n[0][c] + w[1] * n[1][c];
            }
            h[i][0] += 0.25;
            h[i][1] -= 0.25;
        }
        let expect = [ln(h[0]), ln(h[1])];
        for i in 0..2 {
            for c in 0..2 {
                let got = f.vectors().get(i, c);
                assert!((got - expect[i][c]).abs() < 1e-9, "({i},{c}) {got} vs {}", expect[i][c]);
            }
        }
    }

    fn rig_output_bias(model: &mut VqaModel<f64>, token: usize) {
        let p = model.params_mut();
        p.by_name_mut("model.out.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = p.by_name_mut("model.out.b").unwrap();
        b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        b.data_mut()[token] = 50.0;
    }

    #[test]
    fn generation_stops_immediately_on_eos() {
        let mut model = VqaModel::<f64>::new(tiny_config()).unwrap();
        rig_output_bias(&mut model, EOS);
        let f = model.encode(&grid(8, 8, 4)).unwrap();
        assert_eq!(model.generate_answer(&f, 6).unwrap(), "");
    }

    #[test]
    fn generation_respects_length_cap() {
        let mut model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let c = model.vocab().token_of('d').unwrap();
        rig_output_bias(&mut model, c);
        let f = model.encode(&grid(8, 8, 4)).unwrap();
        assert_eq!(model.generate_answer(&f, 3).unwrap(), "ddd");
    }

    #[test]
    fn generation_never_emits_pad_or_bos() {
        let mut model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let e = model.vocab().token_of('e').unwrap();
        rig_output_bias(&mut model, PAD);
        let b = model.params_mut().by_name_mut("model.out.b").unwrap();
        b.data_mut()[BOS] = 50.0;
        b.data_mut()[e] = 1.0;
        let f = model.encode(&grid(8, 8, 4)).unwrap();
        assert_eq!(model.generate_answer(&f, 4).unwrap(), "eeee");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let p = model.params_mut();
        p.by_name_mut("model.out.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.by_name_mut("model.out.b").unwrap().data_mut()[EOS] = 1000.0;
        let f = model.encode(&grid(8, 8, 4)).unwrap();
        let target = model.vocab().encode("").unwrap();
        assert_eq!(model.vqa_loss(&f, &target).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let p = model.params_mut();
        p.by_name_mut("model.out.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let f = model.encode(&grid(8, 8, 4)).unwrap();
        let target = model.vocab().encode("abc").unwrap();
        let loss = model.vqa_loss(&f, &target).unwrap();
        assert!((loss - (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_set_logits_cross_entropy() {
        // V = 3, two steps with hand-chosen logits
        let logits = [[2.0, 0.0, -1.0], [0.5, 0.5, 3.0]];
        let targets = [0usize, 2];
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Matrix::from_rows(&[logits[0].to_vec(), logits[1].to_vec()]));
        let ce = tape.cross_entropy(l, &targets);
        let step = |z: [f64; 3], t: usize| -(z[t].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let expect = (step(logits[0], 0) + step(logits[1], 2)) / 2.0;
        assert!((tape.value(ce).item() - expect).abs() < 1e-12);
        assert!((expect - 0.1609).abs() < 1e-3);
    }

    #[test]
    fn target_contract() {
        let model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let f = model.encode(&grid(8, 8, 4)).unwrap();
        let empty = TokenSeq::new(vec![], model.vocab()).unwrap();
        assert!(matches!(model.vqa_loss(&f, &empty), Err(Error::Contract(_))));
        let no_eos = TokenSeq::new(vec![3, 4], model.vocab()).unwrap();
        assert!(matches!(model.vqa_loss(&f, &no_eos), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_know_unused_parameters() {
        let model = VqaModel::<f64>::new(tiny_config()).unwrap();
        let g = grid(8, 4, 4); // 1x2 grid: only row 0 and columns 0..2 used
        let target = model.vocab().encode("ab").unwrap();
        let (_, grads) = model.loss_and_gradients(&g, &target).unwrap();
        let row_emb = grads.get(model.params().id("model.row_emb").unwrap());
        assert!(row_emb.row(1).iter().all(|&v| v == 0.0));
        assert!(row_emb.row(0).iter().any(|&v| v != 0.0));
        let pos = grads.get(model.params().id("model.dec_pos").unwrap());
        assert!(pos.row(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f32_model_runs() {
        let model = VqaModel::<f32>::new(tiny_config()).unwrap();
        let img = RasterImage::blank(8, 8);
        let g: PatchGrid<f32> = patchify(&img, 4);
        let f = model.encode(&g).unwrap();
        assert_eq!(f.len(), 4);
        assert!(model.generate_answer(&f, 3).unwrap().chars().count() <= 3);
    }
}
