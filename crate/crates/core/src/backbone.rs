//! Tiny decoder-only transformer: learned absolute positions, pre-norm
//! blocks, output head tied to the token embedding.
//!
//! All weights are stored `[in × out]` and applied to row vectors, so a
//! linear site computes `x · W + b` for every token row `x`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::{lit, Graph, Scalar, Segment, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.d_ff", self.d_ff),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// The linear layers of a block that adapters can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl SiteKind {
    pub const ALL: [SiteKind; 6] = [
        SiteKind::Query,
        SiteKind::Key,
        SiteKind::Value,
        SiteKind::Output,
        SiteKind::FfnUp,
        SiteKind::FfnDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Query => "q_proj",
            SiteKind::Key => "k_proj",
            SiteKind::Value => "v_proj",
            SiteKind::Output => "o_proj",
            SiteKind::FfnUp => "ffn_up",
            SiteKind::FfnDown => "ffn_down",
        }
    }
}

/// Stable address of one backbone linear: layer index × kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.as_str())
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown site `{s}` (expected e.g. layer0.q_proj)"));
        let (layer, kind) = s.split_once('.').ok_or_else(bad)?;
        let layer = layer.strip_prefix("layer").and_then(|l| l.parse().ok()).ok_or_else(bad)?;
        let kind = SiteKind::ALL.into_iter().find(|k| k.as_str() == kind).ok_or_else(bad)?;
        Ok(SiteId { layer, kind })
    }
}

#[derive(Clone, Debug)]
pub struct Linear<S = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    fn init(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[d_in, d_out], |_| lit(rng.normal() * std)),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    fn cast<T: Scalar>(&self) -> Linear<T> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<S = f32> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub o: Linear<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub ffn_up: Linear<S>,
    pub ffn_down: Linear<S>,
}

impl<S: Scalar> Block<S> {
    fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1_gain: Tensor::full(&[d], S::one()),
            ln1_bias: Tensor::zeros(&[d]),
            q: Linear::init(rng, d, d),
            k: Linear::init(rng, d, d),
            v: Linear::init(rng, d, d),
            o: Linear::init(rng, d, d),
            ln2_gain: Tensor::full(&[d], S::one()),
            ln2_bias: Tensor::zeros(&[d]),
            ffn_up: Linear::init(rng, d, cfg.d_ff),
            ffn_down: Linear::init(rng, cfg.d_ff, d),
        }
    }

    pub fn linear(&self, kind: SiteKind) -> &Linear<S> {
        match kind {
            SiteKind::Query => &self.q,
            SiteKind::Key => &self.k,
            SiteKind::Value => &self.v,
            SiteKind::Output => &self.o,
            SiteKind::FfnUp => &self.ffn_up,
            SiteKind::FfnDown => &self.ffn_down,
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("q_proj.weight", &self.q.weight),
            ("q_proj.bias", &self.q.bias),
            ("k_proj.weight", &self.k.weight),
            ("k_proj.bias", &self.k.bias),
            ("v_proj.weight", &self.v.weight),
            ("v_proj.bias", &self.v.bias),
            ("o_proj.weight", &self.o.weight),
            ("o_proj.bias", &self.o.bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn_up.weight", &self.ffn_up.weight),
            ("ffn_up.bias", &self.ffn_up.bias),
            ("ffn_down.weight", &self.ffn_down.weight),
            ("ffn_down.bias", &self.ffn_down.bias),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("q_proj.weight", &mut self.q.weight),
            ("q_proj.bias", &mut self.q.bias),
            ("k_proj.weight", &mut self.k.weight),
            ("k_proj.bias", &mut self.k.bias),
            ("v_proj.weight", &mut self.v.weight),
            ("v_proj.bias", &mut self.v.bias),
            ("o_proj.weight", &mut self.o.weight),
            ("o_proj.bias", &mut self.o.bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ffn_up.weight", &mut self.ffn_up.weight),
            ("ffn_up.bias", &mut self.ffn_up.bias),
            ("ffn_down.weight", &mut self.ffn_down.weight),
            ("ffn_down.bias", &mut self.ffn_down.bias),
        ]
    }

    fn cast<T: Scalar>(&self) -> Block<T> {
        Block {
            ln1_gain: self.ln1_gain.cast(),
            ln1_bias: self.ln1_bias.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
            ln2_gain: self.ln2_gain.cast(),
            ln2_bias: self.ln2_bias.cast(),
            ffn_up: self.ffn_up.cast(),
            ffn_down: self.ffn_down.cast(),
        }
    }
}

/// Several token sequences packed row-wise into one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Batch {
    pub fn new<T: AsRef<[usize]>>(sequences: &[T]) -> Self {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for s in sequences {
            let s = s.as_ref();
            segments.push(Segment {
                start: tokens.len(),
                len: s.len(),
            });
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Self {
            tokens,
            positions,
            segments,
        }
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Row index of the last token of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start + s.len - 1).collect()
    }
}

/// Per-pass state threaded through the layers: which adapters are active,
/// whether adapter dropout is on, and the router logits each gated site
/// produced (in site order, one `[rows × (N+1)]` matrix each).
pub struct ForwardCtx<'a, S: Scalar = f32> {
    pub adapters: Option<&'a AdapterSet<S>>,
    pub dropout: Option<&'a mut Rng>,
    pub router_logits: Vec<(SiteId, Var)>,
}

impl<'a, S: Scalar> ForwardCtx<'a, S> {
    pub fn eval(adapters: Option<&'a AdapterSet<S>>) -> Self {
        Self {
            adapters,
            dropout: None,
            router_logits: Vec::new(),
        }
    }

    pub fn train(adapters: Option<&'a AdapterSet<S>>, rng: &'a mut Rng) -> Self {
        Self {
            adapters,
            dropout: Some(rng),
            router_logits: Vec::new(),
        }
    }
}

/// θ_m: every tensor of the language model.
#[derive(Clone, Debug)]
pub struct Backbone<S = f32> {
    config: ModelConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub lnf_gain: Tensor<S>,
    pub lnf_bias: Tensor<S>,
}

impl<S: Scalar> Backbone<S> {
    /// Fresh, trainable model.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = Tensor::from_fn(&[config.vocab_size, d], |_| lit(rng.normal() * 0.1));
        let pos_emb = Tensor::from_fn(&[config.max_seq_len, d], |_| lit(rng.normal() * 0.1));
        let blocks = (0..config.n_layers).map(|_| Block::init(rng, &config)).collect();
        let mut model = Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::full(&[d], S::one()),
            lnf_bias: Tensor::zeros(&[d]),
            config,
        };
        model.unfreeze();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("ln_f.gain".into(), &self.lnf_gain));
        out.push(("ln_f.bias".into(), &self.lnf_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut().into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("ln_f.gain".into(), &mut self.lnf_gain));
        out.push(("ln_f.bias".into(), &mut self.lnf_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Stops gradient flow into every backbone tensor.
    pub fn freeze(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(false);
        }
    }

    pub fn unfreeze(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(true);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn linear(&self, site: SiteId) -> Result<&Linear<S>> {
        self.blocks
            .get(site.layer)
            .map(|b| b.linear(site.kind))
            .ok_or_else(|| Error::Config(format!("site {site} does not exist in a {}-layer model", self.blocks.len())))
    }

    pub fn cast<T: Scalar>(&self) -> Backbone<T> {
        Backbone {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if let Some(seg) = batch.segments.iter().find(|s| s.len > self.config.max_seq_len) {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                seg.len, self.config.max_seq_len
            )));
        }
        if batch.segments.iter().any(|s| s.len == 0) {
            return Err(Error::Contract("empty sequence in batch".into()));
        }
        Ok(())
    }

    fn site_linear(&self, g: &mut Graph<S>, site: SiteId, x: Var, ctx: &mut ForwardCtx<'_, S>) -> Result<Var> {
        let base = self.blocks[site.layer].linear(site.kind).forward(g, x)?;
        let Some(adapter) = ctx.adapters.and_then(|a| a.site(site)) else {
            return Ok(base);
        };
        let out = adapter.apply(g, x, base, ctx.dropout.as_deref_mut())?;
        if let Some(logits) = out.router_logits {
            ctx.router_logits.push((site, logits));
        }
        Ok(out.output)
    }

    /// Multi-head causal self-attention sublayer on already-normalized input.
    pub fn attention(
        &self,
        g: &mut Graph<S>,
        layer: usize,
        x: Var,
        segments: &[Segment],
        ctx: &mut ForwardCtx<'_, S>,
    ) -> Result<Var> {
        let q = self.site_linear(g, SiteId::new(layer, SiteKind::Query), x, ctx)?;
        let k = self.site_linear(g, SiteId::new(layer, SiteKind::Key), x, ctx)?;
        let v = self.site_linear(g, SiteId::new(layer, SiteKind::Value), x, ctx)?;
        let a = g.causal_attention(q, k, v, self.config.n_heads, segments)?;
        self.site_linear(g, SiteId::new(layer, SiteKind::Output), a, ctx)
    }

    /// Position-wise feed-forward sublayer: up-linear, GELU, down-linear.
    pub fn ffn(&self, g: &mut Graph<S>, layer: usize, x: Var, ctx: &mut ForwardCtx<'_, S>) -> Result<Var> {
        let h = self.site_linear(g, SiteId::new(layer, SiteKind::FfnUp), x, ctx)?;
        let h = g.gelu(h);
        self.site_linear(g, SiteId::new(layer, SiteKind::FfnDown), h, ctx)
    }

    /// Final hidden states `[rows × d]` after the last layer norm.
    pub fn hidden(&self, g: &mut Graph<S>, batch: &Batch, ctx: &mut ForwardCtx<'_, S>) -> Result<Var> {
        self.check_batch(batch)?;
        let emb = g.param(&self.tok_emb);
        let tok = g.embedding(emb, &batch.tokens)?;
        let pos_table = g.param(&self.pos_emb);
        let pos = g.embedding(pos_table, &batch.positions)?;
        let mut x = g.add(tok, pos)?;
        for (l, b) in self.blocks.iter().enumerate() {
            let (gn, bs) = (g.param(&b.ln1_gain), g.param(&b.ln1_bias));
            let h = g.layer_norm(x, gn, bs, LN_EPS)?;
            let a = self.attention(g, l, h, &batch.segments, ctx)?;
            x = g.add(x, a)?;
            let (gn, bs) = (g.param(&b.ln2_gain), g.param(&b.ln2_bias));
            let h = g.layer_norm(x, gn, bs, LN_EPS)?;
            let f = self.ffn(g, l, h, ctx)?;
            x = g.add(x, f)?;
        }
        let (gn, bs) = (g.param(&self.lnf_gain), g.param(&self.lnf_bias));
        g.layer_norm(x, gn, bs, LN_EPS)
    }

    /// Next-token logits `[rows × vocab]` for every row of the batch.
    pub fn forward(&self, g: &mut Graph<S>, batch: &Batch, ctx: &mut ForwardCtx<'_, S>) -> Result<Var> {
        let h = self.hidden(g, batch, ctx)?;
        let emb = g.param(&self.tok_emb);
        g.matmul_nt(h, emb)
    }

    /// Logits for only the selected rows.
    pub fn forward_rows(
        &self,
        g: &mut Graph<S>,
        batch: &Batch,
        rows: &[usize],
        ctx: &mut ForwardCtx<'_, S>,
    ) -> Result<Var> {
        let h = self.hidden(g, batch, ctx)?;
        let picked = g.embedding(h, rows)?;
        let emb = g.param(&self.tok_emb);
        g.matmul_nt(picked, emb)
    }

    /// Convenience: logits for one sequence, evaluation mode.
    pub fn logits(&self, tokens: &[usize], adapters: Option<&AdapterSet<S>>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval(adapters);
        let out = self.forward(&mut g, &Batch::new(&[tokens]), &mut ctx)?;
        Ok(g.to_tensor(out))
    }

    /// Greedy continuation of several prompts at once. Each output holds the
    /// prompt followed by generated tokens; generation for a sequence stops
    /// after it emits `eos`, after `max_new` tokens, or at `max_seq_len`.
    /// Ties go to the lowest token id.
    pub fn generate_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new: usize,
        eos: Option<usize>,
        adapters: Option<&AdapterSet<S>>,
    ) -> Result<Vec<Vec<usize>>> {
        if let Some(p) = prompts.iter().find(|p| p.len() > self.config.max_seq_len) {
            return Err(Error::Contract(format!(
                "prompt of {} tokens exceeds max_seq_len {}",
                p.len(),
                self.config.max_seq_len
            )));
        }
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let mut live: Vec<usize> = (0..seqs.len())
            .filter(|&i| !seqs[i].is_empty() && seqs[i].len() < self.config.max_seq_len)
            .collect();
        for _ in 0..max_new {
            if live.is_empty() {
                break;
            }
            let batch = Batch::new(&live.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>());
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval(adapters);
            let logits = self.forward_rows(&mut g, &batch, &batch.last_rows(), &mut ctx)?;
            let v = self.config.vocab_size;
            let values = g.value(logits);
            let mut still = Vec::with_capacity(live.len());
            for (r, &i) in live.iter().enumerate() {
                let row = &values[r * v..(r + 1) * v];
                let next = argmax(row);
                seqs[i].push(next);
                if Some(next) != eos && seqs[i].len() < self.config.max_seq_len {
                    still.push(i);
                }
            }
            live = still;
        }
        Ok(seqs)
    }

    pub fn generate(&self, prompt: &[usize], max_new: usize, eos: Option<usize>, adapters: Option<&AdapterSet<S>>) -> Result<Vec<usize>> {
        Ok(self
            .generate_batch(&[prompt.to_vec()], max_new, eos, adapters)?
            .pop()
            .expect("one sequence"))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
