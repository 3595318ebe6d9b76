//! WebAssembly bindings for the static demo page in `www/`. Every export
//! takes plain numbers or strings and returns a JSON string; the native
//! functions underneath are tested without a browser.

use moei::autodiff::{Graph, Tensor};
use moei::bench::metrics::{lcs_len, rouge_l, ROUGE_BETA};
use moei::bench::tasks::Domain;
use moei::bench::train::{pretrain, run_method, score_all, Method, Scores};
use moei::bench::Benchmark;
use moei::config::RunConfig;
use moei::objectives::gate_loss;
use moei::rng::Rng;
use moei::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const GATE_DIM: usize = 8;
const GATE_TOKENS: usize = 6;

#[derive(Debug, Serialize)]
pub struct GateTrace {
    /// Per step: gate loss before the update.
    pub loss: Vec<f64>,
    /// Gate rows (α, β₁..β_N) per token after the last step.
    pub gates: Vec<Vec<f64>>,
    /// Mean α over tokens after the last step.
    pub mean_alpha: f64,
}

/// A single router `[GATE_DIM × (N+1)]` with random weights of size `scale`,
/// fed random tokens, then trained for `steps` plain gradient steps on the
/// gate loss (all mass to the α slot).
pub fn gate_trace(n_blocks: usize, scale: f64, steps: usize, lr: f64, seed: u64) -> Result<GateTrace> {
    if n_blocks == 0 {
        return Err(moei::Error::Config("N must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let x = Tensor::<f64>::from_fn(&[GATE_TOKENS, GATE_DIM], |_| rng.normal());
    let mut w = Tensor::<f64>::from_fn(&[GATE_DIM, n_blocks + 1], |_| scale * rng.normal());
    let mut loss = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let wv = g.variable(&w);
        let xv = g.constant(&x);
        let logits = g.matmul(xv, wv)?;
        let l = gate_loss(&mut g, &[logits])?;
        loss.push(g.scalar_value(l));
        let grads = g.backward(l)?;
        let dw = grads.wrt(wv).map(<[f64]>::to_vec).unwrap_or_default();
        for (p, d) in w.data_mut().iter_mut().zip(dw) {
            *p -= lr * d;
        }
    }
    let mut g = Graph::new();
    let wv = g.constant(&w);
    let xv = g.constant(&x);
    let logits = g.matmul(xv, wv)?;
    let p = g.softmax(logits, 1)?;
    let gates: Vec<Vec<f64>> = g.to_tensor(p).data().chunks(n_blocks + 1).map(<[f64]>::to_vec).collect();
    let mean_alpha = gates.iter().map(|r| r[0]).sum::<f64>() / gates.len() as f64;
    Ok(GateTrace { loss, gates, mean_alpha })
}

#[derive(Debug, Serialize)]
pub struct RougeBreakdown {
    pub lcs: usize,
    pub precision: f64,
    pub recall: f64,
    pub beta: f64,
    pub f: f64,
}

/// Rouge-L of two whitespace-tokenized strings.
pub fn rouge_breakdown(candidate: &str, reference: &str) -> RougeBreakdown {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let lcs = lcs_len(&c, &r);
    let ratio = |n: usize| if n == 0 { 0.0 } else { lcs as f64 / n as f64 };
    RougeBreakdown {
        lcs,
        precision: ratio(c.len()),
        recall: ratio(r.len()),
        beta: ROUGE_BETA,
        f: rouge_l(&c, &r),
    }
}

#[derive(Debug, Serialize)]
pub struct ToyRun {
    pub method: String,
    pub before: Scores,
    pub after: Scores,
    pub gi_delta: f64,
    pub ei_delta: f64,
    pub epoch_loss: Vec<f64>,
    /// Mean Σβ over all sites on GI and EI evaluation tokens (gated methods).
    pub beta_gi: Option<f64>,
    pub beta_ei: Option<f64>,
}

/// Small enough to pretrain and adapt in a browser tab within seconds.
pub fn toy_config(seed: u64, lambda: f64) -> Result<RunConfig> {
    let mut cfg = RunConfig::reference();
    cfg.apply_text(
        "model.d_model = 32\nmodel.n_heads = 2\nmodel.d_ff = 64\nmodel.max_seq_len = 32\n\
         bench.gi_train = 300\nbench.gi_eval = 30\nbench.ei_train = 120\nbench.ei_eval = 30\n\
         train.epochs = 2\ntrain.pretrain_epochs = 2\ntrain.replay_size = 32\ntrain.batch_size = 16\n",
    )?;
    cfg.train.seed = seed;
    cfg.train.lambda = lambda;
    cfg.validate()?;
    Ok(cfg)
}

/// Pretrains a toy backbone, then adapts it with `method`.
pub fn toy_run(method: &str, seed: u64, lambda: f64) -> Result<ToyRun> {
    let method: Method = method.parse()?;
    let cfg = toy_config(seed, lambda)?;
    let bench = Benchmark::generate(&cfg.bench)?;
    let pre = pretrain(&cfg.model, &bench, &cfg.train, |_, _| {})?;
    let before = score_all(&pre, None, &bench)?;
    let out = run_method(method, &pre, &bench, &cfg.adapters, &cfg.train, &before)?;
    let mean_beta = |d: Domain| {
        out.router.as_ref().map(|s| {
            let sites = s.sites();
            sites.iter().map(|&site| s.domain_beta_sum(site, d)).sum::<f64>() / sites.len().max(1) as f64
        })
    };
    Ok(ToyRun {
        method: method.as_str().to_string(),
        gi_delta: out.after.gi_mean() - before.gi_mean(),
        ei_delta: out.after.ei_mean() - before.ei_mean(),
        beta_gi: mean_beta(Domain::Gi),
        beta_ei: mean_beta(Domain::Ei),
        epoch_loss: out.epoch_loss,
        before,
        after: out.after,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    match r {
        Ok(v) => serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())),
        Err(e) => Err(JsValue::from_str(&e.to_string())),
    }
}

#[wasm_bindgen(js_name = gateTrace)]
pub fn gate_trace_js(n_blocks: usize, scale: f64, steps: usize, lr: f64, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(gate_trace(n_blocks, scale, steps, lr, seed))
}

#[wasm_bindgen(js_name = rougeL)]
pub fn rouge_js(candidate: &str, reference: &str) -> std::result::Result<String, JsValue> {
    to_js(Ok(rouge_breakdown(candidate, reference)))
}

#[wasm_bindgen(js_name = toyRun)]
pub fn toy_run_js(method: &str, seed: u64, lambda: f64) -> std::result::Result<String, JsValue> {
    to_js(toy_run(method, seed, lambda))
}

/// Names accepted by `toyRun`.
#[wasm_bindgen(js_name = methods)]
pub fn methods_js() -> Vec<String> {
    Method::ALL.iter().map(|m| m.as_str().to_string()).collect()
}
