//! Transformer building blocks shared by the encoder-decoder and the scorer.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamSet, ParamSpec};
use crate::scalar::Scalar;

fn lookup<T: Scalar>(params: &ParamSet<T>, name: &str) -> Result<ParamId> {
    params.id(name).ok_or_else(|| Error::Checkpoint {
        entry: name.to_string(),
        message: "missing tensor".into(),
    })
}

/// Initialization scale for a weight with `fan_in` inputs: the variance of
/// a uniform draw on `±1/sqrt(fan_in)`, i.e. `1 / (3 fan_in)`. The larger
/// `1 / fan_in` variance makes the first attention maps sharp enough that
/// trained encoder features collapse towards a shared direction, which
/// leaves the page scorer nothing to match on.
pub fn fan_in_init(fan_in: usize) -> Init {
    Init::Normal(1.0 / (3.0 * fan_in as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn specs(prefix: &str, fan_in: usize, fan_out: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.w"), fan_in, fan_out, fan_in_init(fan_in)),
            ParamSpec::new(format!("{prefix}.b"), 1, fan_out, Init::Zeros),
        ]
    }

    pub fn resolve<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: lookup(params, &format!("{prefix}.w"))?,
            b: lookup(params, &format!("{prefix}.b"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.w));
        tape.add_row(y, bound.var(self.b))
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.g"), 1, d, Init::Ones),
            ParamSpec::new(format!("{prefix}.b"), 1, d, Init::Zeros),
        ]
    }

    pub fn resolve<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Ok(Norm {
            gain: lookup(params, &format!("{prefix}.g"))?,
            shift: lookup(params, &format!("{prefix}.b"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let n = tape.mul_row(n, bound.var(self.gain));
        tape.add_row(n, bound.var(self.shift))
    }
}

/// Multi-head attention with biased query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        ["q", "k", "v", "o"]
            .iter()
            .flat_map(|p| Linear::specs(&format!("{prefix}.{p}"), d, d))
            .collect()
    }

    pub fn resolve<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Ok(Attention {
            q: Linear::resolve(params, &format!("{prefix}.q"))?,
            k: Linear::resolve(params, &format!("{prefix}.k"))?,
            v: Linear::resolve(params, &format!("{prefix}.v"))?,
            o: Linear::resolve(params, &format!("{prefix}.o"))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        queries: Var,
        memory: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.q.forward(tape, bound, queries);
        let k = self.k.forward(tape, bound, memory);
        let v = self.v.forward(tape, bound, memory);
        let a = tape.attention(q, k, v, heads, causal);
        self.o.forward(tape, bound, a)
    }
}

/// Position-wise two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut s = Linear::specs(&format!("{prefix}.up"), d, hidden);
        s.extend(Linear::specs(&format!("{prefix}.down"), hidden, d));
        s
    }

    pub fn resolve<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::resolve(params, &format!("{prefix}.up"))?,
            down: Linear::resolve(params, &format!("{prefix}.down"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Var {
        let h = self.up.forward(tape, bound, x);
        let h = tape.gelu(h);
        self.down.forward(tape, bound, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub ln_attn: Norm,
    pub attn: Attention,
    pub ln_ff: Norm,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut s = Norm::specs(&format!("{prefix}.ln1"), d);
        s.extend(Attention::specs(&format!("{prefix}.attn"), d));
        s.extend(Norm::specs(&format!("{prefix}.ln2"), d));
        s.extend(FeedForward::specs(&format!("{prefix}.ff"), d, hidden));
        s
    }

    pub fn resolve<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Ok(SelfAttentionBlock {
            ln_attn: Norm::resolve(params, &format!("{prefix}.ln1"))?,
            attn: Attention::resolve(params, &format!("{prefix}.attn"))?,
            ln_ff: Norm::resolve(params, &format!("{prefix}.ln2"))?,
            ff: FeedForward::resolve(params, &format!("{prefix}.ff"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var, heads: usize) -> Var {
        let n = self.ln_attn.forward(tape, bound, x);
        let a = self.attn.forward(tape, bound, n, n, heads, false);
        let x = tape.add(x, a);
        let n = self.ln_ff.forward(tape, bound, x);
        let f = self.ff.forward(tape, bound, n);
        tape.add(x, f)
    }
}

/// Fails with a numeric error naming `stage` when `v` holds a non-finite entry.
pub fn ensure_finite<T: Scalar>(tape: &Tape<'_, T>, v: Var, stage: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(stage()))
    }
}
