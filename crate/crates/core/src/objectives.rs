//! Task loss, gate modulation loss, their weighted sum, and AdamW.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::{lit, Graph, ParamId, Scalar, Tensor, Var};
use crate::backbone::{Backbone, Batch, ForwardCtx};
use crate::bench::tasks::{Domain, TaskSample, IGNORE};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub modulation_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `total = task + λ·modulation`.
pub fn combined_loss(task: f64, modulation: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("train.lambda must be ≥ 0, got {lambda}")));
    }
    let total = task + lambda * modulation;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite (task {task}, modulation {modulation})")));
    }
    Ok(LossBreakdown {
        task_loss: task,
        modulation_loss: modulation,
        total,
        lambda,
    })
}

/// Mean negative log-likelihood of the answer tokens of `samples`, under
/// the (optionally adapted) model. The prompt positions carry no loss and
/// the output head only runs on supervised rows.
pub fn lm_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &Backbone<S>,
    adapters: Option<&AdapterSet<S>>,
    samples: &[TaskSample],
    dropout: Option<&mut Rng>,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let encoded: Vec<_> = samples.iter().map(TaskSample::encode).collect();
    let batch = Batch::new(&encoded.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (seg, e) in batch.segments.iter().zip(&encoded) {
        for (i, &l) in e.labels.iter().enumerate() {
            if l != IGNORE {
                rows.push(seg.start + i);
                targets.push(l);
            }
        }
    }
    let mut ctx = ForwardCtx {
        adapters,
        dropout,
        router_logits: Vec::new(),
    };
    let logits = model.forward_rows(g, &batch, &rows, &mut ctx)?;
    g.cross_entropy(logits, &targets, IGNORE)
}

/// [`lm_loss`] restricted to EI samples.
pub fn task_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &Backbone<S>,
    adapters: Option<&AdapterSet<S>>,
    samples: &[TaskSample],
    dropout: Option<&mut Rng>,
) -> Result<Var> {
    if let Some(s) = samples.iter().find(|s| s.domain != Domain::Ei) {
        return Err(Error::Contract(format!("task loss given a {} sample from `{}`", s.domain, s.task)));
    }
    lm_loss(g, model, adapters, samples, dropout)
}

/// Cross-entropy of every router's gate against the α slot, averaged over
/// all (site, token) pairs. Each entry is `[rows × (N+1)]` logits.
pub fn gate_loss<S: Scalar>(g: &mut Graph<S>, router_logits: &[Var]) -> Result<Var> {
    if router_logits.is_empty() {
        return Err(Error::Contract("modulation loss needs at least one router".into()));
    }
    let all = g.concat_rows(router_logits)?;
    let rows = g.shape(all)[0];
    g.cross_entropy(all, &vec![0; rows], IGNORE)
}

/// Gate loss of the GI `samples`: pushes every router toward sending all
/// of its mass to the backbone slot.
pub fn modulation_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &Backbone<S>,
    adapters: &AdapterSet<S>,
    samples: &[TaskSample],
    dropout: Option<&mut Rng>,
) -> Result<Var> {
    if !adapters.has_router() {
        return Err(Error::Contract("modulation loss needs gated adapters".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.domain != Domain::Gi) {
        return Err(Error::Contract(format!("modulation loss given an {} sample from `{}`", s.domain, s.task)));
    }
    if samples.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.encode().tokens).collect();
    let mut ctx = ForwardCtx {
        adapters: Some(adapters),
        dropout,
        router_logits: Vec::new(),
    };
    model.hidden(g, &Batch::new(&seqs), &mut ctx)?;
    let logits: Vec<Var> = ctx.router_logits.iter().map(|(_, v)| *v).collect();
    gate_loss(g, &logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Moments are keyed by tensor id and
/// kept in double precision.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every tensor that holds a gradient, then zeroes the
    /// gradients. Frozen tensors are skipped. A non-finite gradient aborts
    /// the step before any tensor is modified.
    pub fn step<S: Scalar>(&mut self, params: &mut [(String, &mut Tensor<S>)]) -> Result<()> {
        let mut sq = 0.0f64;
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if let Some(bad) = g.iter().position(|v| !v.to_f64().unwrap_or(f64::NAN).is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient in {name} at element {bad}")));
                }
                sq += g.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>();
            }
        }
        let c = self.config;
        let clip = if c.max_grad_norm > 0.0 && sq.sqrt() > c.max_grad_norm {
            c.max_grad_norm / sq.sqrt()
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (_, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            let grad: Vec<f64> = match t.grad() {
                Some(g) => g.iter().map(|v| v.to_f64().unwrap_or(0.0) * clip).collect(),
                None => vec![0.0; n],
            };
            let mom = self.state.entry(t.id()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                let mut x = p.to_f64().unwrap_or(0.0);
                x -= c.lr * c.weight_decay * x;
                x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                *p = lit(x);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{inject, AdapterSpec};
    use crate::backbone::ModelConfig;
    use crate::bench::tasks::{gen_ei_tasks, gen_gi_tasks, SplitSizes};
    use crate::bench::vocab::VOCAB_SIZE;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
        }
    }

    fn samples() -> (Vec<TaskSample>, Vec<TaskSample>) {
        let sizes = SplitSizes { train: 8, eval: 2 };
        let ei = gen_ei_tasks(1, sizes).unwrap()[0].train.clone();
        let gi = gen_gi_tasks(1, sizes).unwrap()[0].train.clone();
        (ei, gi)
    }

    #[test]
    fn combined_loss_cases() {
        assert_eq!(combined_loss(2.0, 1.0, 0.0).unwrap().total, 2.0);
        assert!((combined_loss(2.0, 1.0, 0.1).unwrap().total - 2.1).abs() < 1e-12);
        assert!((combined_loss(2.0, 1.0, 2.0).unwrap().total - 4.0).abs() < 1e-12);
        assert!(matches!(combined_loss(2.0, 1.0, -0.5), Err(Error::Config(_))));
        assert!(matches!(combined_loss(f64::NAN, 1.0, 0.5), Err(Error::Numeric(_))));
    }

    #[test]
    fn combined_loss_is_linear_in_lambda() {
        let pts: Vec<(f64, f64)> = [0.0, 0.7, 3.1]
            .iter()
            .map(|&l| (l, combined_loss(1.3, 0.4, l).unwrap().total))
            .collect();
        let slope01 = (pts[1].1 - pts[0].1) / (pts[1].0 - pts[0].0);
        let slope02 = (pts[2].1 - pts[0].1) / (pts[2].0 - pts[0].0);
        assert!((slope01 - slope02).abs() < 1e-12);
        assert!((slope01 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_task_loss_is_ln_vocab() {
        let mut model = Backbone::<f64>::new(tiny(), &mut Rng::new(1)).unwrap();
        model.tok_emb = Tensor::zeros(model.tok_emb.shape());
        let (ei, _) = samples();
        let mut g = Graph::new();
        let l = task_loss(&mut g, &model, None, &ei, None).unwrap();
        assert!((g.scalar_value(l) - (VOCAB_SIZE as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn task_loss_rejects_gi_and_modulation_rejects_ei() {
        let model = Backbone::<f32>::new(tiny(), &mut Rng::new(1)).unwrap();
        let set = inject(&model, &AdapterSpec::default(), &mut Rng::new(2)).unwrap();
        let (ei, gi) = samples();
        let mut g = Graph::new();
        assert!(matches!(task_loss(&mut g, &model, None, &gi, None), Err(Error::Contract(_))));
        assert!(matches!(modulation_loss(&mut g, &model, &set, &ei, None), Err(Error::Contract(_))));
        let lora = inject(&model, &AdapterSpec::lora(4), &mut Rng::new(2)).unwrap();
        assert!(matches!(modulation_loss(&mut g, &model, &lora, &gi, None), Err(Error::Contract(_))));
    }

    #[test]
    fn task_loss_ignores_masked_content() {
        let model = Backbone::<f64>::new(tiny(), &mut Rng::new(3)).unwrap();
        let (ei, _) = samples();
        let a = ei[0].clone();
        let mut b = a.clone();
        b.instruction = vec![22, 23];
        let loss = |s: &TaskSample| {
            let mut g = Graph::new();
            let l = task_loss(&mut g, &model, None, std::slice::from_ref(s), None).unwrap();
            g.scalar_value(l)
        };
        // Prompt content can still change the answer logits through
        // attention, so the masked positions themselves are probed: the
        // supervised rows must be exactly the answer and EOS positions.
        let enc = a.encode();
        let supervised = enc.labels.iter().filter(|l| **l != IGNORE).count();
        assert_eq!(supervised, a.target.len() + 1);
        // and the per-row losses at masked positions never enter the mean
        let mut g = Graph::new();
        let batch = Batch::new(&[enc.tokens.clone()]);
        let logits = model.forward(&mut g, &batch, &mut ForwardCtx::eval(None)).unwrap();
        let full = g.cross_entropy(logits, &enc.labels, IGNORE).unwrap();
        assert!((g.scalar_value(full) - loss(&a)).abs() < 1e-12);
        assert!(loss(&b).is_finite());
    }

    #[test]
    fn modulation_loss_at_uniform_gate_is_ln_n_plus_one() {
        let model = Backbone::<f64>::new(tiny(), &mut Rng::new(4)).unwrap();
        let set = inject(&model, &AdapterSpec::default(), &mut Rng::new(5)).unwrap();
        let (_, gi) = samples();
        let mut g = Graph::new();
        let l = modulation_loss(&mut g, &model, &set, &gi, None).unwrap();
        assert!((g.scalar_value(l) - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_alpha_gives_near_zero_modulation_loss() {
        let mut g = Graph::<f64>::new();
        let mut logits = vec![-20.0; 3 * 9];
        for r in 0..3 {
            logits[r * 9] = 20.0;
        }
        let v = g.constant_raw(&[3, 9], logits).unwrap();
        let l = gate_loss(&mut g, &[v]).unwrap();
        assert!(g.scalar_value(l) < 1e-15);
        assert!(g.scalar_value(l) >= 0.0);
    }

    #[test]
    fn gate_loss_gradient_is_softmax_minus_onehot() {
        let mut rng = Rng::new(6);
        let raw: Vec<f64> = (0..2 * 5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let t = Tensor::new(&[2, 5], raw.clone()).unwrap();
        let mut g = Graph::new();
        let v = g.variable(&t);
        let l = gate_loss(&mut g, &[v]).unwrap();
        let grads = g.backward(l).unwrap();
        let got = grads.wrt(v).unwrap();
        for r in 0..2 {
            let row = &raw[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            for c in 0..5 {
                let want = (row[c].exp() / z - f64::from(u8::from(c == 0))) / 2.0;
                assert!((got[r * 5 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modulation_gradient_raises_alpha_and_lowers_betas() {
        // one token through one router: after a descent step on W the α
        // logit of that token rises and every β logit falls
        let mut rng = Rng::new(7);
        let spec = AdapterSpec::default();
        let id = crate::backbone::SiteId::new(0, crate::backbone::SiteKind::FfnDown);
        let mut site = crate::adapters::AdapterSite::<f64>::new(id, 6, 6, &spec, &mut rng).unwrap();
        *site.router.as_mut().unwrap() = Tensor::from_fn(&[6, 9], |_| rng.uniform(-0.5, 0.5)).trainable();
        let x = Tensor::from_fn(&[1, 6], |_| rng.uniform(-1.0, 1.0));
        let logits_of = |site: &crate::adapters::AdapterSite<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let l = site.router_logits(&mut g, xv).unwrap().unwrap();
            g.value(l).to_vec()
        };
        let before = logits_of(&site);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let l = site.router_logits(&mut g, xv).unwrap().unwrap();
        let loss = gate_loss(&mut g, &[l]).unwrap();
        let grads = g.backward(loss).unwrap();
        let w = site.router.as_mut().unwrap();
        let step: Vec<f64> = grads.of_param(w.id()).unwrap().to_vec();
        for (p, g) in w.data_mut().iter_mut().zip(step) {
            *p -= 0.1 * g;
        }
        let after = logits_of(&site);
        assert!(after[0] > before[0]);
        for c in 1..9 {
            assert!(after[c] < before[c], "slot {c}");
        }
    }

    #[test]
    fn adamw_zero_gradient_is_a_noop() {
        let mut t = Tensor::<f32>::full(&[3], 0.5).trainable();
        t.accumulate_grad(&[0.0; 3]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [("p".into(), &mut t)]).unwrap();
        assert_eq!(t.data(), &[0.5; 3]);
    }

    #[test]
    fn adamw_first_steps_match_hand_recurrence() {
        let cfg = AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut t = Tensor::<f64>::scalar(1.0).trainable();
        let mut opt = AdamW::new(cfg);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for k in 1..=2 {
            t.accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut [("p".into(), &mut t)]).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((t.data()[0] - x).abs() < 1e-12);
            assert!(t.grad().unwrap().iter().all(|g| *g == 0.0));
        }
        // first step is -lr up to eps
        let mut t = Tensor::<f64>::scalar(1.0).trainable();
        t.accumulate_grad(&[1.0]).unwrap();
        AdamW::new(cfg).step(&mut [("p".into(), &mut t)]).unwrap();
        assert!((t.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_shrinks_by_one_minus_lr_d() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.2,
            ..AdamWConfig::default()
        };
        let mut t = Tensor::<f64>::full(&[2], 3.0).trainable();
        let mut opt = AdamW::new(cfg);
        for _ in 0..3 {
            t.accumulate_grad(&[0.0, 0.0]).unwrap();
            opt.step(&mut [("p".into(), &mut t)]).unwrap();
        }
        let want = 3.0 * (1.0f64 - 0.02).powi(3);
        assert!((t.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adamw_nan_names_the_parameter() {
        let mut a = Tensor::<f32>::full(&[2], 1.0).trainable();
        let mut b = Tensor::<f32>::full(&[2], 1.0).trainable();
        a.accumulate_grad(&[0.1, 0.1]).unwrap();
        b.accumulate_grad(&[0.1, f32::NAN]).unwrap();
        let err = AdamW::new(AdamWConfig::default())
            .step(&mut [("layer0.q_proj.lora_a".into(), &mut a), ("layer1.router".into(), &mut b)])
            .unwrap_err();
        assert!(err.to_string().contains("layer1.router"), "{err}");
        assert_eq!(a.data(), &[1.0, 1.0]);
    }

    #[test]
    fn adamw_clips_global_norm() {
        let cfg = AdamWConfig {
            lr: 0.1,
            max_grad_norm: 1.0,
            ..AdamWConfig::default()
        };
        // Adam is scale-free on the first step, so clipping shows up in the
        // moments: a clipped run and an unclipped run on g/10 coincide.
        let mut big = Tensor::<f64>::scalar(0.0).trainable();
        let mut small = Tensor::<f64>::scalar(0.0).trainable();
        let mut o1 = AdamW::new(cfg);
        let mut o2 = AdamW::new(AdamWConfig { max_grad_norm: 0.0, ..cfg });
        for g in [10.0, 5.0] {
            big.accumulate_grad(&[g]).unwrap();
            o1.step(&mut [("b".into(), &mut big)]).unwrap();
            small.accumulate_grad(&[g.min(1.0)]).unwrap();
            o2.step(&mut [("s".into(), &mut small)]).unwrap();
        }
        assert!((big.data()[0] - small.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn overfit_four_samples() {
        let model_cfg = tiny();
        let mut model = Backbone::<f32>::new(model_cfg, &mut Rng::new(9)).unwrap();
        let (ei, _) = samples();
        let batch = &ei[..4];
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        });
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let mut g = Graph::new();
            let l = task_loss(&mut g, &model, None, batch, None).unwrap();
            last = g.scalar_value(l).into();
            let grads = g.backward(l).unwrap();
            let mut params = model.named_params_mut();
            for (_, t) in params.iter_mut() {
                grads.accumulate_into(t).unwrap();
            }
            opt.step(&mut params).unwrap();
        }
        assert!(last < 0.01, "final loss {last}");
    }
}
