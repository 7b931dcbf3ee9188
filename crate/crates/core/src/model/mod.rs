//! Decoder-only transformer with residual blocks.
//!
//! Each block applies (optionally layer-normalized) causal multi-head
//! attention and then a ReLU feed-forward network, each added back onto the
//! residual stream. The head reads the final residual stream directly.

mod counter;
mod io;
mod params;

use std::borrow::Cow;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Backend, Eager, Scalar, Tape, Tensor, Var};
use crate::rng;

pub use counter::{PassCounter, PassCounts};
pub use io::MODEL_FORMAT;
pub use params::{BlockParams, HeadKind, LayerNormParams, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub use_layernorm: bool,
    pub head: HeadKind,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            vocab_size,
            max_seq,
            use_layernorm: true,
            head: HeadKind::LmUnembedding,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let HeadKind::Classifier { n_classes } = self.head {
            if n_classes < 2 {
                return Err(Error::Config("classifier head needs at least 2 classes".into()));
            }
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Number of head outputs: vocabulary size or class count.
    pub fn head_width(&self) -> usize {
        match self.head {
            HeadKind::LmUnembedding => self.vocab_size,
            HeadKind::Classifier { n_classes } => n_classes,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Residual-stream values X^(0..=L) for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace<T> {
    pub states: Vec<Tensor<T>>,
}

impl<T: Scalar> HiddenTrace<T> {
    /// Input of block `l`; `state(L)` is the final output.
    pub fn state(&self, l: usize) -> &Tensor<T> {
        &self.states[l]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Head outputs at every position, `n_tokens x head_width`.
    pub logits: Tensor<T>,
    /// Final residual stream, `n_tokens x d_model`.
    pub hidden: Tensor<T>,
    pub trace: Option<HiddenTrace<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn last_logits(&self) -> &[T] {
        self.logits.row(self.logits.rows() - 1)
    }

    pub fn last_hidden(&self) -> &[T] {
        self.hidden.row(self.hidden.rows() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    params: ModelParams<Tensor<T>>,
    origin: Vec<usize>,
}

fn expect_shape<T: Scalar>(t: &Tensor<T>, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() == shape {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} has shape {:?}, expected {shape:?}",
            t.shape()
        )))
    }
}

impl<T: Scalar> TransformerModel<T> {
    pub fn new(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        let origin = (0..params.blocks.len()).collect();
        Self::with_origin(config, params, origin)
    }

    /// `origin[i]` is the index block `i` had before any removals.
    pub fn with_origin(
        config: ModelConfig,
        params: ModelParams<Tensor<T>>,
        origin: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        if params.blocks.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "config declares {} layers but {} blocks are present",
                c.n_layers,
                params.blocks.len()
            )));
        }
        if origin.len() != c.n_layers {
            return Err(Error::Shape("block origin list length differs from n_layers".into()));
        }
        let (d, f) = (c.d_model, c.d_ff);
        expect_shape(&params.embedding, &[c.vocab_size, d], "embedding")?;
        expect_shape(&params.positional, &[c.max_seq, d], "positional")?;
        expect_shape(&params.head, &[d, c.head_width()], "head")?;
        for (i, b) in params.blocks.iter().enumerate() {
            let at = |n: &str| format!("blocks[{i}].{n}");
            for (name, t) in [("w_q", &b.w_q), ("w_k", &b.w_k), ("w_v", &b.w_v), ("w_o", &b.w_o)] {
                expect_shape(t, &[d, d], &at(name))?;
            }
            expect_shape(&b.w_1, &[d, f], &at("w_1"))?;
            expect_shape(&b.b_1, &[f], &at("b_1"))?;
            expect_shape(&b.w_2, &[f, d], &at("w_2"))?;
            expect_shape(&b.b_2, &[d], &at("b_2"))?;
            for (name, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                match (ln, c.use_layernorm) {
                    (Some(ln), true) => {
                        expect_shape(&ln.gamma, &[d], &at(&format!("{name}_gamma")))?;
                        expect_shape(&ln.beta, &[d], &at(&format!("{name}_beta")))?;
                    }
                    (None, false) => {}
                    (Some(_), false) => {
                        return Err(Error::Shape(format!(
                            "{} present but use_layernorm is off",
                            at(name)
                        )))
                    }
                    (None, true) => {
                        return Err(Error::Shape(format!(
                            "{} missing but use_layernorm is on",
                            at(name)
                        )))
                    }
                }
            }
        }
        Ok(Self {
            config,
            params,
            origin,
        })
    }

    /// Random initialization with scaled-normal weights, zero biases and unit LN gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let depth = (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: &[usize], std: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(dist.sample(&mut r))).collect();
            Tensor::new(shape.to_vec(), data).expect("finite samples")
        };
        let sd = 1.0 / (d as f64).sqrt();
        let embedding = normal(&[config.vocab_size, d], 1.0);
        let positional = normal(&[config.max_seq, d], 0.1);
        let ln = |use_ln: bool| {
            use_ln.then(|| LayerNormParams {
                gamma: Tensor::full(&[d], T::one()),
                beta: Tensor::zeros(&[d]),
            })
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockParams {
                w_q: normal(&[d, d], sd),
                w_k: normal(&[d, d], sd),
                w_v: normal(&[d, d], sd),
                w_o: normal(&[d, d], sd / depth),
                w_1: normal(&[d, f], sd),
                b_1: Tensor::zeros(&[f]),
                w_2: normal(&[f, d], 1.0 / (f as f64).sqrt() / depth),
                b_2: Tensor::zeros(&[d]),
                ln1: ln(config.use_layernorm),
                ln2: ln(config.use_layernorm),
            });
        }
        let head = normal(&[d, config.head_width()], sd);
        Self::new(
            config,
            ModelParams {
                embedding,
                positional,
                blocks,
                head,
            },
        )
    }

    /// Every weight zero; LN gains one when enabled.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let z = |s: &[usize]| Tensor::<T>::zeros(s);
        let ln = |use_ln: bool| {
            use_ln.then(|| LayerNormParams {
                gamma: Tensor::full(&[d], T::one()),
                beta: Tensor::zeros(&[d]),
            })
        };
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                w_q: z(&[d, d]),
                w_k: z(&[d, d]),
                w_v: z(&[d, d]),
                w_o: z(&[d, d]),
                w_1: z(&[d, f]),
                b_1: z(&[f]),
                w_2: z(&[f, d]),
                b_2: z(&[d]),
                ln1: ln(config.use_layernorm),
                ln2: ln(config.use_layernorm),
            })
            .collect();
        let params = ModelParams {
            embedding: z(&[config.vocab_size, d]),
            positional: z(&[config.max_seq, d]),
            blocks,
            head: z(&[d, config.head_width()]),
        };
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<Tensor<T>> {
        &self.params
    }

    /// In-place weight access for optimizers; shapes must be preserved.
    pub(crate) fn params_mut(&mut self) -> &mut ModelParams<Tensor<T>> {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn block(&self, l: usize) -> &BlockParams<Tensor<T>> {
        &self.params.blocks[l]
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams<Tensor<T>>, Vec<usize>) {
        (self.config, self.params, self.origin)
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Applies `update` to every weight tensor in [`ModelParams::tensors`] order,
    /// rejecting the result if it breaks the model's shape contract.
    pub fn try_map_params(
        &self,
        mut update: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut params = self.params.clone();
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            *t = update(i, t)?;
        }
        Self::with_origin(self.config.clone(), params, self.origin.clone())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Tape-free forward pass; counts one forward pass on `counter`.
    pub fn forward(
        &self,
        tokens: &[usize],
        capture: bool,
        counter: &PassCounter,
    ) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        let view: ModelParams<Cow<'_, Tensor<T>>> = self.params.map(&mut |t| Cow::Borrowed(t));
        let mut be = Eager::new();
        let run = run(&self.config, &mut be, &view, tokens, capture)?;
        counter.add_forward(1);
        Ok(ForwardOutput {
            logits: run.logits.into_owned(),
            hidden: run.hidden.into_owned(),
            trace: run.trace.map(|states| HiddenTrace { states }),
        })
    }

    /// Recomputes block `l` on an arbitrary residual-stream input.
    pub fn block_forward(&self, l: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        if l >= self.n_layers() {
            return Err(Error::LayerIndex {
                index: l,
                layers: self.n_layers(),
            });
        }
        let w = self.params.blocks[l].map(&mut |t| Cow::Borrowed(t));
        let mut be = Eager::new();
        Ok(block(&self.config, &mut be, &w, &Cow::Borrowed(x))?.into_owned())
    }

    /// Argmax of the last-position head outputs, optionally restricted to
    /// `options`. Ties go to the lowest index.
    pub fn predict(
        &self,
        tokens: &[usize],
        options: Option<&[usize]>,
        counter: &PassCounter,
    ) -> Result<usize> {
        let out = self.forward(tokens, false, counter)?;
        argmax_restricted(out.last_logits(), options)
    }

    /// The model with block `l` removed; block `l - 1`'s output feeds block `l + 1`.
    pub fn remove_layer(&self, l: usize) -> Result<Self> {
        let n = self.n_layers();
        if l >= n {
            return Err(Error::LayerIndex { index: l, layers: n });
        }
        if n < 2 {
            return Err(Error::OnlyLayer);
        }
        let mut out = self.clone();
        out.params.blocks.remove(l);
        out.origin.remove(l);
        out.config.n_layers -= 1;
        Ok(out)
    }

    /// Removes several blocks at once, given as current indices.
    pub fn remove_layers(&self, layers: &[usize]) -> Result<Self> {
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != layers.len() {
            return Err(Error::PruneInfeasible("duplicate layer in removal set".into()));
        }
        if sorted.len() >= self.n_layers() {
            return Err(Error::OnlyLayer);
        }
        let mut out = self.clone();
        for &l in sorted.iter().rev() {
            out = out.remove_layer(l)?;
        }
        Ok(out)
    }

    /// Records the forward pass on `tape` with every weight as a leaf.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
    ) -> Result<(Var, ModelParams<Var>)> {
        self.check_tokens(tokens)?;
        let vars = self.params.map(&mut |t| tape.leaf(t.clone()));
        let run = run(&self.config, tape, &vars, tokens, false)?;
        Ok((run.logits, vars))
    }

    /// Summed cross-entropy of `(position, target)` pairs and its gradient with
    /// respect to every weight. Counts one forward and one backward pass.
    pub fn loss_and_gradient(
        &self,
        tokens: &[usize],
        targets: &[(usize, usize)],
        counter: &PassCounter,
    ) -> Result<(T, ModelParams<Tensor<T>>)> {
        let mut tape = Tape::new();
        let (logits, vars) = self.forward_on_tape(&mut tape, tokens)?;
        let loss = tape.cross_entropy(logits, targets)?;
        counter.add_forward(1);
        let value = tape.value(loss)?.data()[0];
        let mut grads = tape.backward(loss)?;
        counter.add_backward(1);
        Ok((value, vars.map(&mut |v| grads.take(*v))))
    }
}

pub fn argmax_restricted<T: Scalar>(logits: &[T], options: Option<&[usize]>) -> Result<usize> {
    let mut best: Option<(usize, T)> = None;
    let mut consider = |i: usize| {
        let v = logits[i];
        match best {
            Some((bi, bv)) if v < bv || (v == bv && i > bi) => {}
            _ => best = Some((i, v)),
        }
    };
    match options {
        Some(opts) => {
            if opts.is_empty() {
                return Err(Error::Config("options must be nonempty".into()));
            }
            for &o in opts {
                if o >= logits.len() {
                    return Err(Error::TokenOutOfVocab {
                        token: o,
                        vocab: logits.len(),
                    });
                }
                consider(o);
            }
        }
        None => (0..logits.len()).for_each(&mut consider),
    }
    Ok(best.expect("at least one candidate").0)
}

struct Run<V, T> {
    logits: V,
    hidden: V,
    trace: Option<Vec<Tensor<T>>>,
}

fn run<T: Scalar, B: Backend<T>>(
    cfg: &ModelConfig,
    be: &mut B,
    p: &ModelParams<B::V>,
    tokens: &[usize],
    capture: bool,
) -> Result<Run<B::V, T>> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = be.gather_rows(&p.embedding, tokens)?;
    let pos = be.gather_rows(&p.positional, &positions)?;
    let mut x = be.add(&tok, &pos)?;
    let mut trace = capture.then(|| vec![be.value(&x).clone()]);
    for w in &p.blocks {
        x = block(cfg, be, w, &x)?;
        if let Some(t) = trace.as_mut() {
            t.push(be.value(&x).clone());
        }
    }
    let logits = be.matmul(&x, &p.head)?;
    Ok(Run {
        logits,
        hidden: x,
        trace,
    })
}

fn block<T: Scalar, B: Backend<T>>(
    cfg: &ModelConfig,
    be: &mut B,
    w: &BlockParams<B::V>,
    x: &B::V,
) -> Result<B::V> {
    let eps = T::of(cfg.ln_eps);
    let h = match &w.ln1 {
        Some(ln) => be.layer_norm(x, &ln.gamma, &ln.beta, eps)?,
        None => x.clone(),
    };
    let attn = attention(cfg, be, w, &h)?;
    let x = be.add(x, &attn)?;
    let h = match &w.ln2 {
        Some(ln) => be.layer_norm(&x, &ln.gamma, &ln.beta, eps)?,
        None => x.clone(),
    };
    let f = be.matmul(&h, &w.w_1)?;
    let f = be.add_row(&f, &w.b_1)?;
    let f = be.relu(&f)?;
    let f = be.matmul(&f, &w.w_2)?;
    let f = be.add_row(&f, &w.b_2)?;
    be.add(&x, &f)
}

fn attention<T: Scalar, B: Backend<T>>(
    cfg: &ModelConfig,
    be: &mut B,
    w: &BlockParams<B::V>,
    h: &B::V,
) -> Result<B::V> {
    let q = be.matmul(h, &w.w_q)?;
    let k = be.matmul(h, &w.w_k)?;
    let v = be.matmul(h, &w.w_v)?;
    let dh = cfg.d_head();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                be.slice_cols(&q, head * dh, dh)?,
                be.slice_cols(&k, head * dh, dh)?,
                be.slice_cols(&v, head * dh, dh)?,
            )
        };
        let kt = be.transpose(&kh)?;
        let scores = be.matmul(&qh, &kt)?;
        let scores = be.scale(&scores, scale)?;
        let probs = be.causal_softmax(&scores)?;
        heads.push(be.matmul(&probs, &vh)?);
    }
    let merged = if heads.len() == 1 {
        heads.pop().expect("one head")
    } else {
        be.concat_cols(&heads)?
    };
    be.matmul(&merged, &w.w_o)
}
