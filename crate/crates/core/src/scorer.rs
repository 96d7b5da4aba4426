//! Self-attention page scorer.
//!
//! Maps the encoder feature of one question+page pair to a relevance score
//! in `[0, 1]`: self-attention over the feature (no positional encoding is
//! added here), aggregation to a single vector, dropout, then three linear
//! layers with rectifiers after the first two and a logistic output.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{ensure_finite, Linear, Norm, SelfAttentionBlock};
use crate::model::EncoderFeature;
use crate::params::{Bound, GradSet, Init, ParamId, ParamSet, ParamSpec};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parameter namespace of the scorer inside checkpoints.
pub const SCORER_NAMESPACE: &str = "scorer";

/// Factor applied to the shared query/key initialization of the scorer's
/// self-attention (the logits scale with its square).
pub const QK_INIT_GAIN: f64 = 2.0;

/// How the scorer's output sequence is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Output at position 0.
    FirstVector,
    /// A learned token is prepended before self-attention; its output is taken.
    ClsToken,
    /// Mean over all output positions.
    AdaptiveAvgPool,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::FirstVector, Aggregation::ClsToken, Aggregation::AdaptiveAvgPool];
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::FirstVector => "first_vector",
            Aggregation::ClsToken => "cls_token",
            Aggregation::AdaptiveAvgPool => "adaptive_avg_pool",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "first" | "first_vector" => Ok(Aggregation::FirstVector),
            "cls" | "cls_token" => Ok(Aggregation::ClsToken),
            "avg" | "mean" | "adaptive_avg_pool" => Ok(Aggregation::AdaptiveAvgPool),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub n_sa_layers: usize,
    pub n_heads: usize,
    pub aggregation: Aggregation,
    pub dropout_p: f64,
    /// Output widths of the three linear layers; the last must be 1.
    pub head_dims: Vec<usize>,
    /// Hidden width of the feed-forward part of each self-attention layer.
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self::for_width(64)
    }
}

impl ScorerConfig {
    /// Defaults for an encoder of width `d_model`: one layer, 16 heads,
    /// first-vector aggregation, head widths `d -> d/2 -> 1`.
    pub fn for_width(d_model: usize) -> Self {
        ScorerConfig {
            n_sa_layers: 1,
            n_heads: 16,
            aggregation: Aggregation::FirstVector,
            dropout_p: 0.1,
            head_dims: vec![d_model, (d_model / 2).max(1), 1],
            d_ff: 2 * d_model,
            seed: 0,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_sa_layers == 0 {
            return fail("the scorer needs at least one self-attention layer".into());
        }
        if self.n_heads == 0 || !d_model.is_multiple_of(self.n_heads) {
            return fail(format!("{} scorer heads do not divide d_model {d_model}", self.n_heads));
        }
        if self.head_dims.len() != 3 || self.head_dims.contains(&0) {
            return fail(format!("expected three positive head widths, got {:?}", self.head_dims));
        }
        if self.head_dims[2] != 1 {
            return fail(format!("final head width must be 1, got {}", self.head_dims[2]));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout probability {} outside [0, 1)", self.dropout_p));
        }
        if self.d_ff == 0 {
            return fail("scorer d_ff must be positive".into());
        }
        Ok(())
    }

    pub fn param_specs(&self, d_model: usize) -> Vec<ParamSpec> {
        let ns = SCORER_NAMESPACE;
        let mut s = Vec::new();
        if self.aggregation == Aggregation::ClsToken {
            s.push(ParamSpec::new(format!("{ns}.cls"), 1, d_model, Init::Normal(0.5)));
        }
        for i in 0..self.n_sa_layers {
            s.extend(SelfAttentionBlock::specs(&format!("{ns}.sa.{i}"), d_model, self.d_ff));
        }
        s.extend(Norm::specs(&format!("{ns}.ln_f"), d_model));
        let mut fan_in = d_model;
        for (i, &w) in self.head_dims.iter().enumerate() {
            s.extend(Linear::specs(&format!("{ns}.head.{i}"), fan_in, w));
            fan_in = w;
        }
        s
    }
}

/// Matching score of a question-page pair.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelevanceScore(f64);

impl RelevanceScore {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(RelevanceScore(value))
        } else {
            Err(Error::Contract(format!("relevance score {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ScorerIds {
    cls: Option<ParamId>,
    blocks: Vec<SelfAttentionBlock>,
    ln_f: Norm,
    head: Vec<Linear>,
}

/// Trainable relevance head over encoder features.
#[derive(Debug, Clone)]
pub struct PageScorer<T> {
    config: ScorerConfig,
    d_model: usize,
    params: ParamSet<T>,
    ids: ScorerIds,
}

impl<T: Scalar> PageScorer<T> {
    pub fn new(config: ScorerConfig, d_model: usize) -> Result<Self> {
        config.validate(d_model)?;
        let mut params = ParamSet::initialize(&config.param_specs(d_model), config.seed);
        for i in 0..config.n_sa_layers {
            tie_query_key(&mut params, &format!("{SCORER_NAMESPACE}.sa.{i}.attn"));
        }
        Self::from_params(config, d_model, params)
    }

    pub fn from_params(config: ScorerConfig, d_model: usize, params: ParamSet<T>) -> Result<Self> {
        config.validate(d_model)?;
        let params = params.conform(&config.param_specs(d_model))?;
        let ns = SCORER_NAMESPACE;
        let ids = ScorerIds {
            cls: params.id(&format!("{ns}.cls")),
            blocks: (0..config.n_sa_layers)
                .map(|i| SelfAttentionBlock::resolve(&params, &format!("{ns}.sa.{i}")))
                .collect::<Result<_>>()?,
            ln_f: Norm::resolve(&params, &format!("{ns}.ln_f"))?,
            head: (0..3)
                .map(|i| Linear::resolve(&params, &format!("{ns}.head.{i}")))
                .collect::<Result<_>>()?,
        };
        Ok(PageScorer {
            config,
            d_model,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Self-attention stage followed by aggregation: one `1 x d` row.
    pub fn pooled_on(&self, tape: &mut Tape<'_, T>, bound: &Bound, feature: Var) -> Result<Var> {
        let (len, width) = tape.value(feature).shape();
        if len == 0 {
            return Err(Error::Contract("cannot score an empty feature".into()));
        }
        if width != self.d_model {
            return Err(Error::Contract(format!("feature width {width} differs from scorer width {}", self.d_model)));
        }
        let mut x = match self.ids.cls {
            Some(cls) => tape.concat_rows(&[bound.var(cls), feature]),
            None => feature,
        };
        for (i, block) in self.ids.blocks.iter().enumerate() {
            x = block.forward(tape, bound, x, self.config.n_heads);
            ensure_finite(tape, x, || format!("scorer layer {i}"))?;
        }
        let x = self.ids.ln_f.forward(tape, bound, x);
        Ok(match self.config.aggregation {
            Aggregation::FirstVector | Aggregation::ClsToken => tape.row(x, 0),
            Aggregation::AdaptiveAvgPool => tape.mean_rows(x),
        })
    }

    /// Full scoring graph. `dropout_mask`, when given, multiplies the pooled
    /// vector (training mode).
    pub fn score_on(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        feature: Var,
        dropout_mask: Option<Matrix<T>>,
    ) -> Result<Var> {
        let mut h = self.pooled_on(tape, bound, feature)?;
        if let Some(mask) = dropout_mask {
            h = tape.mul_const(h, mask);
        }
        let last = self.ids.head.len() - 1;
        for (i, layer) in self.ids.head.iter().enumerate() {
            h = layer.forward(tape, bound, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        let s = tape.sigmoid(h);
        ensure_finite(tape, s, || "scorer output".into())?;
        Ok(s)
    }

    /// Inverted-dropout mask for the pooled vector.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix<T> {
        let p = self.config.dropout_p;
        let keep = T::lit(1.0 / (1.0 - p));
        let data = (0..self.d_model)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        Matrix::from_vec(1, self.d_model, data)
    }

    /// Evaluation-mode score (no dropout, deterministic).
    pub fn score(&self, feature: &EncoderFeature<T>) -> Result<RelevanceScore> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let f = tape.leaf_ref(feature.vectors(), false);
        let s = self.score_on(&mut tape, &bound, f, None)?;
        RelevanceScore::new(tape.value(s).item().as_f64())
    }

    /// Training-mode score with a freshly drawn dropout mask.
    pub fn score_training<R: Rng + ?Sized>(&self, feature: &EncoderFeature<T>, rng: &mut R) -> Result<RelevanceScore> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let f = tape.leaf_ref(feature.vectors(), false);
        let mask = self.dropout_mask(rng);
        let s = self.score_on(&mut tape, &bound, f, Some(mask))?;
        RelevanceScore::new(tape.value(s).item().as_f64())
    }

    /// Squared error against `target` and gradients of every scorer tensor.
    /// Returns `(loss, predicted score, gradients)`.
    pub fn loss_and_gradients(
        &self,
        feature: &EncoderFeature<T>,
        target: T,
        dropout_mask: Option<Matrix<T>>,
    ) -> Result<(T, T, GradSet<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let f = tape.leaf_ref(feature.vectors(), false);
        let s = self.score_on(&mut tape, &bound, f, dropout_mask)?;
        let pred = tape.value(s).item();
        let loss = tape.squared_error(s, target);
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss);
        let g = bound.collect(&self.params, &mut grads)?;
        Ok((value, pred, g))
    }
}

/// Starts the key projection equal to the (scaled) query projection, making
/// the initial attention logits a positive semi-definite form: tokens attend
/// most to tokens with similar features. Relevance here hinges on whether a
/// page token matches a question token, a pairwise signal that a random
/// bilinear form hides at initialization; the shared start exposes it so the
/// first gradients already correlate with the target.
fn tie_query_key<T: Scalar>(params: &mut ParamSet<T>, prefix: &str) {
    let gain = T::lit(QK_INIT_GAIN);
    let q = params.by_name_mut(&format!("{prefix}.q.w")).expect("query projection is declared");
    for x in q.data_mut() {
        *x = *x * gain;
    }
    let q = q.clone();
    *params.by_name_mut(&format!("{prefix}.k.w")).expect("key projection is declared") = q;
}

/// Logistic squashing applied to the final linear output.
pub fn squash<T: Scalar>(x: T) -> T {
    sigmoid(x)
}
