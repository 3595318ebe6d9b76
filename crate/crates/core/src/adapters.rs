//! LoRA, Mixture-of-LoRA and the intra/inter modulation router.
//!
//! Storage follows the backbone's row-vector convention. The N low-rank
//! pairs of a site are concatenated: `a` is `[d_in × N·r]` (block i owns
//! columns `i·r..(i+1)·r`) and `b` is `[N·r × d_out]` (block i owns the
//! matching rows), so `x·A_i·B_i` summed over i is just `x·a·b`.
//!
//! The router is `[d_in × (N+1)]`. Column 0 is the backbone slot α, columns
//! 1..=N are the block slots β_i. In the forward pass α is replaced by the
//! constant 1; only the β slots scale the adapter branch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{lit, Graph, Scalar, Tensor, Var};
use crate::backbone::{Backbone, SiteId, SiteKind};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    None,
    Lora,
    Molora,
}

/// How the block outputs are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// No router; blocks are summed with weight 1.
    Off,
    /// Per-token softmax router, α clamped to 1, β_i weighting block i.
    Softmax,
    /// Router present, but every block gets the same share `Σβ / N` of the
    /// gate. Keeps the α-vs-adapter balance while removing per-block choice.
    EqualShare,
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)*
                    _ => Err(Error::Config(format!(
                        "`{s}` is not one of: {}", [$($s),*].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(AdapterMode { None => "none", Lora => "lora", Molora => "molora" });
text_enum!(Gate { Off => "off", Softmax => "softmax", EqualShare => "equal_share" });

pub fn default_sites(n_layers: usize) -> Vec<SiteId> {
    (0..n_layers)
        .flat_map(|l| [SiteKind::Query, SiteKind::Value, SiteKind::FfnDown].map(|k| SiteId::new(l, k)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub mode: AdapterMode,
    #[serde(rename = "N")]
    pub n_blocks: usize,
    pub r: usize,
    pub alpha_scaling: f64,
    pub dropout_p: f64,
    pub gate: Gate,
    /// Empty means the default q/v/ffn-down set on every layer.
    pub sites: Vec<SiteId>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Molora,
            n_blocks: 8,
            r: 4,
            alpha_scaling: 1.0,
            dropout_p: 0.1,
            gate: Gate::Softmax,
            sites: Vec::new(),
        }
    }
}

impl AdapterSpec {
    pub fn lora(r: usize) -> Self {
        Self {
            mode: AdapterMode::Lora,
            n_blocks: 1,
            r,
            gate: Gate::Off,
            ..Self::default()
        }
    }

    pub fn molora(n_blocks: usize, r: usize, gate: Gate) -> Self {
        Self {
            mode: AdapterMode::Molora,
            n_blocks,
            r,
            gate,
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self {
            mode: AdapterMode::None,
            gate: Gate::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 {
            return Err(Error::Config(format!("adapters.N = {}: expected N ≥ 1", self.n_blocks)));
        }
        if self.r < 1 {
            return Err(Error::Config(format!("adapters.r = {}: expected r ≥ 1", self.r)));
        }
        if self.mode == AdapterMode::Lora && self.n_blocks != 1 {
            return Err(Error::Config("adapters.mode = lora requires adapters.N = 1".into()));
        }
        if self.mode == AdapterMode::Lora && self.gate != Gate::Off {
            return Err(Error::Config("adapters.mode = lora has no router; set adapters.gate = off".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("adapters.dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if !self.alpha_scaling.is_finite() {
            return Err(Error::Config("adapters.alpha_scaling must be finite".into()));
        }
        Ok(())
    }

    pub fn resolved_sites(&self, n_layers: usize) -> Vec<SiteId> {
        if self.sites.is_empty() {
            default_sites(n_layers)
        } else {
            self.sites.clone()
        }
    }
}

/// Softmax of the router logits, split into the α slot and the β slots.
#[derive(Clone, Debug)]
pub struct GateOutput<S = f32> {
    pub alpha_soft: Tensor<S>,
    pub betas: Tensor<S>,
    pub full: Tensor<S>,
}

impl<S: Scalar> GateOutput<S> {
    fn from_full(full: Tensor<S>) -> Self {
        let (t, c) = (full.shape()[0], full.shape()[1]);
        let d = full.data();
        let alpha = (0..t).map(|i| d[i * c]).collect();
        let betas = (0..t).flat_map(|i| d[i * c + 1..(i + 1) * c].iter().copied()).collect();
        Self {
            alpha_soft: Tensor::new(&[t], alpha).expect("shape"),
            betas: Tensor::new(&[t, c - 1], betas).expect("shape"),
            full,
        }
    }
}

/// Result of running one adapted linear.
pub struct SiteOutput {
    pub output: Var,
    /// `[rows × (N+1)]` pre-softmax router logits when the site is gated.
    pub router_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct AdapterSite<S = f32> {
    pub site: SiteId,
    pub n_blocks: usize,
    pub rank: usize,
    pub alpha_scaling: f64,
    pub dropout_p: f64,
    pub gate: Gate,
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub router: Option<Tensor<S>>,
}

impl<S: Scalar> AdapterSite<S> {
    pub fn new(site: SiteId, d_in: usize, d_out: usize, spec: &AdapterSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let nr = spec.n_blocks * spec.r;
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Tensor::from_fn(&[d_in, nr], |_| lit(rng.uniform(-bound, bound))).trainable();
        let b = Tensor::zeros(&[nr, d_out]).trainable();
        let router = (spec.gate != Gate::Off).then(|| Tensor::zeros(&[d_in, spec.n_blocks + 1]).trainable());
        Ok(Self {
            site,
            n_blocks: spec.n_blocks,
            rank: spec.r,
            alpha_scaling: spec.alpha_scaling,
            dropout_p: spec.dropout_p,
            gate: spec.gate,
            a,
            b,
            router,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[1]
    }

    /// `A_i` as a `[d_in × r]` matrix.
    pub fn block_a(&self, i: usize) -> Tensor<S> {
        let (din, nr, r) = (self.d_in(), self.a.shape()[1], self.rank);
        Tensor::from_fn(&[din, r], |k| self.a.data()[(k / r) * nr + i * r + k % r])
    }

    /// `B_i` as a `[r × d_out]` matrix.
    pub fn block_b(&self, i: usize) -> Tensor<S> {
        let (r, dout) = (self.rank, self.d_out());
        Tensor::new(&[r, dout], self.b.data()[i * r * dout..(i + 1) * r * dout].to_vec()).expect("shape")
    }

    pub fn set_block(&mut self, i: usize, a_i: &Tensor<S>, b_i: &Tensor<S>) -> Result<()> {
        let (din, r, dout, nr) = (self.d_in(), self.rank, self.d_out(), self.a.shape()[1]);
        if a_i.shape() != [din, r] {
            return Err(Error::shape("set_block A", a_i.shape(), &[din, r]));
        }
        if b_i.shape() != [r, dout] {
            return Err(Error::shape("set_block B", b_i.shape(), &[r, dout]));
        }
        for row in 0..din {
            for c in 0..r {
                self.a.data_mut()[row * nr + i * r + c] = a_i.data()[row * r + c];
            }
        }
        self.b.data_mut()[i * r * dout..(i + 1) * r * dout].copy_from_slice(b_i.data());
        Ok(())
    }

    pub fn theta_e(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn theta_g(&self) -> usize {
        self.router.as_ref().map_or(0, Tensor::numel)
    }

    /// Router logits `x · W` for the rows of `x`.
    pub fn router_logits(&self, g: &mut Graph<S>, x: Var) -> Result<Option<Var>> {
        match &self.router {
            Some(w) => {
                let w = g.param(w);
                Ok(Some(g.matmul(x, w)?))
            }
            None => Ok(None),
        }
    }

    /// Gate values for a `[T × d_in]` input, outside any training graph.
    pub fn route(&self, x: &Tensor<S>) -> Result<GateOutput<S>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = self
            .router_logits(&mut g, xv)?
            .ok_or_else(|| Error::Contract(format!("site {} has no router", self.site)))?;
        let p = g.softmax(logits, 1)?;
        Ok(GateOutput::from_full(g.to_tensor(p)))
    }

    /// Adds the adapter branch to `base`, the frozen linear's output on `x`.
    /// With `dropout` set, inverted dropout is applied to the adapter input
    /// (the router always sees the clean input).
    pub fn apply(&self, g: &mut Graph<S>, x: Var, base: Var, dropout: Option<&mut Rng>) -> Result<SiteOutput> {
        let x_ad = match dropout {
            Some(rng) if self.dropout_p > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout_p);
                let shape = g.shape(x).to_vec();
                let n = g.value(x).len();
                let mask = (0..n)
                    .map(|_| if rng.bernoulli(self.dropout_p) { S::zero() } else { lit(keep) })
                    .collect();
                let m = g.constant_raw(&shape, mask)?;
                g.scale_mul(m, x)?
            }
            _ => x,
        };
        let a = g.param(&self.a);
        let mut h = g.matmul(x_ad, a)?;
        let logits = self.router_logits(g, x)?;
        if let Some(logits) = logits {
            let probs = g.softmax(logits, 1)?;
            let betas = g.slice_cols(probs, 1, self.n_blocks + 1)?;
            h = match self.gate {
                Gate::Softmax => {
                    let w = g.repeat_cols(betas, self.rank)?;
                    g.scale_mul(w, h)?
                }
                Gate::EqualShare => {
                    let total = g.row_sum(betas)?;
                    let share = g.scale(total, lit(1.0 / self.n_blocks as f64));
                    g.scale_mul(share, h)?
                }
                Gate::Off => h,
            };
        }
        let b = g.param(&self.b);
        let mut delta = g.matmul(h, b)?;
        if self.alpha_scaling != 1.0 {
            delta = g.scale(delta, lit(self.alpha_scaling));
        }
        Ok(SiteOutput {
            output: g.add(base, delta)?,
            router_logits: logits,
        })
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut v = vec![("lora_a", &self.a), ("lora_b", &self.b)];
        if let Some(w) = &self.router {
            v.push(("router", w));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        let mut v = vec![("lora_a", &mut self.a), ("lora_b", &mut self.b)];
        if let Some(w) = &mut self.router {
            v.push(("router", w));
        }
        v
    }

    fn cast<T: Scalar>(&self) -> AdapterSite<T> {
        AdapterSite {
            site: self.site,
            n_blocks: self.n_blocks,
            rank: self.rank,
            alpha_scaling: self.alpha_scaling,
            dropout_p: self.dropout_p,
            gate: self.gate,
            a: self.a.cast(),
            b: self.b.cast(),
            router: self.router.as_ref().map(Tensor::cast),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub theta_e: usize,
    pub theta_g: usize,
}

/// Every adapted site of one model, keyed by site.
#[derive(Clone, Debug, Default)]
pub struct AdapterSet<S = f32> {
    pub spec: AdapterSpec,
    sites: BTreeMap<SiteId, AdapterSite<S>>,
}

impl<S: Scalar> AdapterSet<S> {
    pub fn site(&self, id: SiteId) -> Option<&AdapterSite<S>> {
        self.sites.get(&id)
    }

    pub fn site_mut(&mut self, id: SiteId) -> Option<&mut AdapterSite<S>> {
        self.sites.get_mut(&id)
    }

    pub fn sites(&self) -> impl Iterator<Item = &AdapterSite<S>> {
        self.sites.values()
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.sites.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn has_router(&self) -> bool {
        self.sites.values().any(|s| s.router.is_some())
    }

    pub fn counts(&self) -> ParamCounts {
        self.sites.values().fold(ParamCounts::default(), |c, s| ParamCounts {
            theta_e: c.theta_e + s.theta_e(),
            theta_g: c.theta_g + s.theta_g(),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        self.sites
            .values()
            .flat_map(|s| s.named().into_iter().map(move |(n, t)| (format!("{}.{n}", s.site), t)))
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.sites
            .values_mut()
            .flat_map(|s| {
                let id = s.site;
                s.named_mut().into_iter().map(move |(n, t)| (format!("{id}.{n}"), t))
            })
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> AdapterSet<T> {
        AdapterSet {
            spec: self.spec.clone(),
            sites: self.sites.iter().map(|(k, v)| (*k, v.cast())).collect(),
        }
    }

    pub(crate) fn insert(&mut self, site: AdapterSite<S>) {
        self.sites.insert(site.site, site);
    }
}

/// Attaches one adapter (with its own router when gated) to every site the
/// spec lists. Mode `none` yields an empty set.
pub fn inject<S: Scalar>(model: &Backbone<S>, spec: &AdapterSpec, rng: &mut Rng) -> Result<AdapterSet<S>> {
    spec.validate()?;
    let mut set = AdapterSet {
        spec: spec.clone(),
        sites: BTreeMap::new(),
    };
    if spec.mode == AdapterMode::None {
        return Ok(set);
    }
    for id in spec.resolved_sites(model.config().n_layers) {
        let lin = model.linear(id)?;
        let mut site_rng = rng.fork(&id.to_string());
        set.insert(AdapterSite::new(id, lin.d_in(), lin.d_out(), spec, &mut site_rng)?);
    }
    Ok(set)
}

pub fn trainable_param_count<S: Scalar>(set: &AdapterSet<S>) -> ParamCounts {
    set.counts()
}
