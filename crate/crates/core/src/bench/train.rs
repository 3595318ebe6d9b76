//! Pretraining on GI, and the adaptation methods compared on EI.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::evaluate;
use super::stats::{router_stats, RouterStats};
use super::tasks::{Domain, Facet, TaskSample};
use super::Benchmark;
use crate::adapters::{inject, AdapterSet, AdapterSpec, Gate};
use crate::autodiff::{lit, Graph, Tensor};
use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::objectives::{combined_loss, lm_loss, modulation_loss, task_loss, AdamW, AdamWConfig, LossBreakdown};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of adapter methods.
    pub lr: f64,
    /// Learning rate of full fine-tuning.
    pub lr_ft: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    /// One modulation batch every this many task steps.
    pub replay_interval: usize,
    pub replay_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lr_ft: 5e-5,
            batch_size: 32,
            epochs: 5,
            lambda: 0.1,
            replay_interval: 10,
            replay_size: 200,
            seed: 0,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
            pretrain_epochs: 3,
            pretrain_lr: 1e-3,
            pretrain_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("train.lr", self.lr), ("train.lr_ft", self.lr_ft), ("train.pretrain_lr", self.pretrain_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be > 0, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("train.lambda must be ≥ 0, got {}", self.lambda)));
        }
        for (k, v) in [("train.batch_size", self.batch_size), ("train.replay_interval", self.replay_interval)] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be ≥ 1")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return Err(Error::Config("train.weight_decay and train.max_grad_norm must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Ft,
    Lora,
    LoraReplay,
    Moei,
    MoeiNoModularExpansion,
    MoeiNoIntraModulation,
    MoeiNoInterModulation,
    MoeiReplay,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ft,
        Method::Lora,
        Method::LoraReplay,
        Method::Moei,
        Method::MoeiNoModularExpansion,
        Method::MoeiNoIntraModulation,
        Method::MoeiNoInterModulation,
        Method::MoeiReplay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::Lora => "LoRA",
            Method::LoraReplay => "LoRA+Replay",
            Method::Moei => "MoEI",
            Method::MoeiNoModularExpansion => "MoEI-ModularExpansion",
            Method::MoeiNoIntraModulation => "MoEI-IntraModulation",
            Method::MoeiNoInterModulation => "MoEI-InterModulation",
            Method::MoeiReplay => "MoEI+Replay",
        }
    }

    /// The adapter layout this method trains; `None` for full fine-tuning.
    /// `base` supplies N, r, dropout and sites for the MoEI family.
    pub fn adapter_spec(self, base: &AdapterSpec) -> Option<AdapterSpec> {
        let moei = || AdapterSpec {
            mode: crate::adapters::AdapterMode::Molora,
            gate: Gate::Softmax,
            ..base.clone()
        };
        let single_rank = base.n_blocks * base.r;
        let lora = || AdapterSpec {
            sites: base.sites.clone(),
            dropout_p: base.dropout_p,
            alpha_scaling: base.alpha_scaling,
            ..AdapterSpec::lora(single_rank)
        };
        match self {
            Method::Ft => None,
            Method::Lora | Method::LoraReplay => Some(lora()),
            Method::Moei | Method::MoeiReplay | Method::MoeiNoInterModulation => Some(moei()),
            Method::MoeiNoModularExpansion => Some(AdapterSpec {
                n_blocks: 1,
                r: single_rank,
                ..moei()
            }),
            Method::MoeiNoIntraModulation => Some(AdapterSpec {
                gate: Gate::EqualShare,
                ..moei()
            }),
        }
    }

    pub fn mixes_replay(self) -> bool {
        matches!(self, Method::LoraReplay | Method::MoeiReplay)
    }

    /// λ used by this method given the configured one.
    pub fn lambda(self, configured: f64) -> f64 {
        match self {
            Method::Ft | Method::Lora | Method::LoraReplay | Method::MoeiNoInterModulation => 0.0,
            _ => configured,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| x.to_ascii_lowercase().replace(['_', ' '], "-").replace('–', "-");
        let want = norm(s);
        Method::ALL.into_iter().find(|m| norm(m.as_str()) == want).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown method `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Metric per EI facet and per GI family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ei: Vec<(Facet, f64)>,
    pub gi: Vec<(String, f64)>,
}

impl Scores {
    pub fn ei(&self, facet: Facet) -> f64 {
        self.ei.iter().find(|(f, _)| *f == facet).map_or(f64::NAN, |(_, v)| *v)
    }

    pub fn gi_family(&self, name: &str) -> f64 {
        self.gi.iter().find(|(f, _)| f == name).map_or(f64::NAN, |(_, v)| *v)
    }

    pub fn ei_mean(&self) -> f64 {
        self.ei.iter().map(|(_, v)| v).sum::<f64>() / self.ei.len().max(1) as f64
    }

    pub fn gi_mean(&self) -> f64 {
        self.gi.iter().map(|(_, v)| v).sum::<f64>() / self.gi.len().max(1) as f64
    }
}

pub fn score_all(model: &Backbone, adapters: Option<&AdapterSet>, bench: &Benchmark) -> Result<Scores> {
    let mut s = Scores::default();
    for f in &bench.ei {
        s.ei.push((f.facet, evaluate(model, adapters, f)?));
    }
    for f in &bench.gi {
        s.gi.push((f.name.clone(), evaluate(model, adapters, f)?));
    }
    Ok(s)
}

/// Snapshot of every backbone value, for exact before/after comparisons.
pub fn backbone_snapshot(model: &Backbone) -> Vec<u8> {
    model
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

fn batches(stream: &[TaskSample], size: usize) -> impl Iterator<Item = &[TaskSample]> {
    stream.chunks(size)
}

/// One optimizer step on `task` (plus `λ·modulation` when a GI modulation
/// batch is given).
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Backbone,
    adapters: Option<&mut AdapterSet>,
    opt: &mut AdamW,
    task: &[TaskSample],
    modulation: Option<&[TaskSample]>,
    lambda: f64,
    dropout: &mut Rng,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let set = adapters.as_deref();
    let pure_ei = task.iter().all(|s| s.domain == Domain::Ei);
    let t = if pure_ei {
        task_loss(&mut g, model, set, task, Some(dropout))?
    } else {
        lm_loss(&mut g, model, set, task, Some(dropout))?
    };
    let mut total = t;
    let mut mod_value = 0.0;
    if let (Some(gi), Some(set)) = (modulation, set) {
        let m = modulation_loss(&mut g, model, set, gi, Some(dropout))?;
        mod_value = g.scalar_value(m).into();
        let weighted = g.scale(m, lit(lambda));
        total = g.add(t, weighted)?;
    }
    let breakdown = combined_loss(g.scalar_value(t).into(), mod_value, if modulation.is_some() { lambda } else { 0.0 })?;
    let grads = g.backward(total)?;
    let mut params = model.named_params_mut();
    if let Some(set) = adapters {
        params.extend(set.named_params_mut());
    }
    for (_, p) in params.iter_mut() {
        grads.accumulate_into(p)?;
    }
    opt.step(&mut params)?;
    Ok(breakdown)
}

/// GI pretraining of a fresh backbone: every GI training sample, shuffled
/// each epoch, full-model AdamW.
pub fn pretrain(model_cfg: &ModelConfig, bench: &Benchmark, cfg: &TrainConfig, mut log: impl FnMut(usize, f64)) -> Result<Backbone> {
    cfg.validate()?;
    let root = Rng::new(cfg.pretrain_seed);
    let mut model = Backbone::new(model_cfg.clone(), &mut root.fork("init"))?;
    let mut data = bench.gi_train();
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.pretrain_lr,
        weight_decay: cfg.weight_decay,
        max_grad_norm: cfg.max_grad_norm,
        ..AdamWConfig::default()
    });
    let mut dropout = root.fork("dropout");
    for epoch in 0..cfg.pretrain_epochs {
        root.fork_indexed("order", epoch as u64).shuffle(&mut data);
        let mut sum = 0.0;
        let mut n = 0;
        for b in batches(&data, cfg.batch_size) {
            let mut g = Graph::new();
            let l = lm_loss(&mut g, &model, None, b, Some(&mut dropout))?;
            sum += f64::from(g.scalar_value(l));
            n += 1;
            let grads = g.backward(l)?;
            let mut params = model.named_params_mut();
            for (_, p) in params.iter_mut() {
                grads.accumulate_into(p)?;
            }
            opt.step(&mut params)?;
        }
        log(epoch, sum / n.max(1) as f64);
    }
    Ok(model)
}

/// Everything a finished adaptation run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub model: Backbone,
    pub adapters: Option<AdapterSet>,
    pub before: Scores,
    pub after: Scores,
    pub router: Option<RouterStats>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub modulation_steps: usize,
}

/// Adapts a copy of `pretrained` on the EI training data with `method`.
/// `before` are the pretrained model's scores (shared by every method).
pub fn run_method(
    method: Method,
    pretrained: &Backbone,
    bench: &Benchmark,
    adapter_base: &AdapterSpec,
    cfg: &TrainConfig,
    before: &Scores,
) -> Result<RunOutcome> {
    cfg.validate()?;
    // Streams depend on the seed only, so methods that share a layout also
    // share their initialization and data order.
    let root = Rng::new(cfg.seed);
    let mut model = pretrained.clone();
    let spec = method.adapter_spec(adapter_base);
    let mut adapters = match &spec {
        Some(spec) => {
            model.freeze();
            Some(inject(&model, spec, &mut root.fork("adapters"))?)
        }
        None => {
            model.unfreeze();
            None
        }
    };
    let lambda = method.lambda(cfg.lambda);
    let replay = bench.replay_set(cfg.replay_size, cfg.seed);
    let gated = adapters.as_ref().is_some_and(AdapterSet::has_router);
    let modulate = gated && lambda > 0.0 && !replay.is_empty();

    let mut stream = bench.ei_train();
    if method.mixes_replay() {
        stream.extend(replay.iter().cloned());
    }
    let lr = if spec.is_none() { cfg.lr_ft } else { cfg.lr };
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        weight_decay: cfg.weight_decay,
        max_grad_norm: cfg.max_grad_norm,
        ..AdamWConfig::default()
    });
    let mut dropout = root.fork("dropout");
    let mut replay_cursor = 0;
    let mut steps = 0;
    let mut modulation_steps = 0;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        root.fork_indexed("order", epoch as u64).shuffle(&mut stream);
        let mut sum = 0.0;
        let mut n = 0;
        for b in batches(&stream, cfg.batch_size) {
            steps += 1;
            let mod_batch: Option<Vec<TaskSample>> = (modulate && steps % cfg.replay_interval == 0).then(|| {
                (0..cfg.batch_size.min(replay.len()))
                    .map(|_| {
                        let s = replay[replay_cursor % replay.len()].clone();
                        replay_cursor += 1;
                        s
                    })
                    .collect()
            });
            modulation_steps += usize::from(mod_batch.is_some());
            let lb = train_step(&mut model, adapters.as_mut(), &mut opt, b, mod_batch.as_deref(), lambda, &mut dropout)?;
            sum += lb.total;
            n += 1;
        }
        epoch_loss.push(sum / n.max(1) as f64);
    }
    let after = score_all(&model, adapters.as_ref(), bench)?;
    let router = match &adapters {
        Some(set) if set.has_router() => Some(router_stats(&model, set, bench)?),
        _ => None,
    };
    Ok(RunOutcome {
        method,
        seed: cfg.seed,
        model,
        adapters,
        before: before.clone(),
        after,
        router,
        epoch_loss,
        steps,
        modulation_steps,
    })
}

/// L2 distance between two backbones' parameters.
pub fn backbone_distance(a: &Backbone, b: &Backbone) -> f64 {
    a.named_params()
        .iter()
        .zip(b.named_params())
        .map(|((_, x), (_, y))| dist2(x, y))
        .sum::<f64>()
        .sqrt()
}

fn dist2(x: &Tensor, y: &Tensor) -> f64 {
    x.data().iter().zip(y.data()).map(|(a, b)| f64::from(a - b).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::BenchConfig;

    fn tiny_bench() -> Benchmark {
        Benchmark::generate(&BenchConfig {
            seed: 3,
            gi_train: 40,
            gi_eval: 8,
            ei_train: 24,
            ei_eval: 8,
        })
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            ..ModelConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 1,
            replay_size: 16,
            replay_interval: 2,
            pretrain_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("moei+replay".parse::<Method>().unwrap(), Method::MoeiReplay);
        assert!(matches!("adapter".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn method_table() {
        let base = AdapterSpec::default();
        assert!(Method::Ft.adapter_spec(&base).is_none());
        let l = Method::Lora.adapter_spec(&base).unwrap();
        assert_eq!((l.n_blocks, l.r, l.gate), (1, 32, Gate::Off));
        let m = Method::MoeiNoModularExpansion.adapter_spec(&base).unwrap();
        assert_eq!((m.n_blocks, m.r, m.gate), (1, 32, Gate::Softmax));
        let m = Method::MoeiNoIntraModulation.adapter_spec(&base).unwrap();
        assert_eq!((m.n_blocks, m.r, m.gate), (8, 4, Gate::EqualShare));
        assert_eq!(Method::MoeiNoInterModulation.lambda(0.1), 0.0);
        assert_eq!(Method::Moei.lambda(0.1), 0.1);
        assert!(Method::MoeiReplay.mixes_replay() && !Method::Moei.mixes_replay());
    }

    #[test]
    fn moei_leaves_backbone_untouched_and_ft_does_not() {
        let bench = tiny_bench();
        let cfg = tiny_train();
        let pre = pretrain(&tiny_model(), &bench, &cfg, |_, _| {}).unwrap();
        let snap = backbone_snapshot(&pre);
        let before = Scores::default();
        let moei = run_method(Method::Moei, &pre, &bench, &AdapterSpec::default(), &cfg, &before).unwrap();
        assert_eq!(backbone_snapshot(&moei.model), snap);
        assert_eq!(backbone_distance(&moei.model, &pre), 0.0);
        assert!(moei.modulation_steps > 0);
        assert!(moei.router.is_some());
        let ft = run_method(Method::Ft, &pre, &bench, &AdapterSpec::default(), &cfg, &before).unwrap();
        assert!(backbone_distance(&ft.model, &pre) > 0.0);
        assert_eq!(ft.modulation_steps, 0);
        // the input checkpoint itself is never modified
        assert_eq!(backbone_snapshot(&pre), snap);
    }

    #[test]
    fn runs_are_deterministic() {
        let bench = tiny_bench();
        let cfg = tiny_train();
        let pre = pretrain(&tiny_model(), &bench, &cfg, |_, _| {}).unwrap();
        let a = run_method(Method::MoeiReplay, &pre, &bench, &AdapterSpec::default(), &cfg, &Scores::default()).unwrap();
        let b = run_method(Method::MoeiReplay, &pre, &bench, &AdapterSpec::default(), &cfg, &Scores::default()).unwrap();
        assert_eq!(a.epoch_loss, b.epoch_loss);
        assert_eq!(a.after, b.after);
    }

    #[test]
    fn zero_replay_disables_modulation() {
        let bench = tiny_bench();
        let cfg = TrainConfig {
            replay_size: 0,
            ..tiny_train()
        };
        let pre = pretrain(&tiny_model(), &bench, &cfg, |_, _| {}).unwrap();
        let a = run_method(Method::Moei, &pre, &bench, &AdapterSpec::default(), &cfg, &Scores::default()).unwrap();
        assert_eq!(a.modulation_steps, 0);
        let b = run_method(Method::MoeiNoInterModulation, &pre, &bench, &AdapterSpec::default(), &cfg, &Scores::default())
            .unwrap();
        assert_eq!(a.epoch_loss, b.epoch_loss);
        assert_eq!(a.after, b.after);
    }
}
