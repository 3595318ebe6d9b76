//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs the desk-scale reference profile end to end (several
//! minutes on one core).

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use moei::adapters::{inject, AdapterSet, AdapterSpec, Gate};
use moei::autodiff::{Graph, Tensor};
use moei::backbone::{Backbone, ModelConfig};
use moei::bench::metrics::{lcs_len, rouge_l, ROUGE_BETA};
use moei::bench::report::ForgettingReport;
use moei::bench::tasks::{Domain, Facet};
use moei::bench::train::{pretrain, run_method, score_all, Method, RunOutcome, Scores};
use moei::bench::Benchmark;
use moei::checkpoint::{self, Checkpoint};
use moei::config::RunConfig;
use moei::export::{metrics_csv, router_csv};
use moei::gradcheck::{model_errors, op_errors, TOLERANCE};
use moei::objectives::modulation_loss;
use moei::rng::Rng;

// Pinned from the reference runs (seed 0: MoEI EI deltas ≥ +0.57, FT GI
// delta −0.50), with margin for platform float differences.
const EI_GAIN: f64 = 0.20;
const FT_GI_LOSS: f64 = 0.10;
const SEEDS: [u64; 3] = [0, 1, 2];
const GRAD_CASES: u64 = 100;

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict { ok, detail: detail.into() }
}

type Check = moei::Result<Verdict>;

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut worst_shift = 0.0f64;
    for seed in 0..GRAD_CASES {
        for (op, e) in op_errors(seed)? {
            if e > worst.1 {
                worst = (op.to_string(), e);
            }
        }
        let m = model_errors(seed, 4)?;
        for (name, e) in m.relative {
            if e > worst.1 {
                worst = (format!("transformer {name}"), e);
            }
        }
        worst_shift = worst_shift.max(m.shift_invariant_abs);
    }
    let took = start.elapsed();
    Ok(verdict(
        worst.1 < TOLERANCE && worst_shift < 1e-9 && took < Duration::from_secs(120),
        format!(
            "{GRAD_CASES} cases, worst relative error {:.2e} ({}), shift-invariant |grad| {worst_shift:.1e}, {:.1}s",
            worst.1,
            worst.0,
            took.as_secs_f64()
        ),
    ))
}

fn random_inputs(rng: &mut Rng, cfg: &ModelConfig, n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..1 + rng.below(cfg.max_seq_len)).map(|_| rng.below(cfg.vocab_size)).collect()).collect()
}

fn no_op_at_init(model: &Backbone) -> Check {
    let mut rng = Rng::new(11);
    let inputs = random_inputs(&mut rng, model.config(), 100);
    let mut worst = 0.0f32;
    for spec in [AdapterSpec::lora(32), AdapterSpec::molora(8, 4, Gate::Softmax)] {
        let set = inject(model, &spec, &mut rng)?;
        for x in &inputs {
            let base = model.logits(x, None)?;
            let adapted = model.logits(x, Some(&set))?;
            worst = worst.max(base.max_abs_diff(&adapted));
        }
    }
    Ok(verdict(worst < 1e-6, format!("LoRA and MoLoRA on 100 inputs, max |Δlogit| {worst:.1e}")))
}

fn gate_contracts(model: &Backbone, bench: &Benchmark) -> Check {
    let mut rng = Rng::new(12);
    let spec = AdapterSpec::molora(8, 4, Gate::Softmax);
    let fresh = inject(model, &spec, &mut rng)?;
    let mut random = fresh.clone();
    for (name, t) in random.named_params_mut() {
        if name.ends_with("router") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-2.0, 2.0) as f32);
        }
    }
    let (mut row_err, mut uniform_err) = (0.0f64, 0.0f64);
    for (set, uniform) in [(&random, false), (&fresh, true)] {
        for site in set.sites() {
            let x = Tensor::from_fn(&[16, site.d_in()], |_| rng.normal() as f32 * 3.0);
            let gate = site.route(&x)?;
            let c = gate.full.shape()[1];
            for row in gate.full.data().chunks(c) {
                row_err = row_err.max((row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs());
                if uniform {
                    for &v in row {
                        uniform_err = uniform_err.max((f64::from(v) - 1.0 / 9.0).abs());
                    }
                }
            }
        }
    }
    let gi: Vec<_> = bench.families().filter(|f| f.domain == Domain::Gi).flat_map(|f| f.eval.iter().take(8).cloned()).collect();
    let mut g = Graph::new();
    let loss = modulation_loss(&mut g, &model.cast::<f64>(), &fresh.cast::<f64>(), &gi, None)?;
    let loss = g.scalar_value(loss);
    let loss_err = (loss - 9f64.ln()).abs();
    Ok(verdict(
        row_err < 1e-6 && uniform_err < 1e-6 && loss_err < 1e-5,
        format!("row-sum error {row_err:.1e}, uniform-gate error {uniform_err:.1e}, modulation loss {loss:.6} vs ln 9"),
    ))
}

fn parameter_parity(model: &Backbone) -> Check {
    let mut rng = Rng::new(13);
    let lora = inject(model, &AdapterSpec::lora(32), &mut rng)?;
    let molora = inject(model, &AdapterSpec::molora(8, 4, Gate::Softmax), &mut rng)?;
    let mut mismatched = Vec::new();
    for site in lora.sites() {
        let other = molora.site(site.site).map_or(0, |s| s.theta_e());
        if other != site.theta_e() {
            mismatched.push(format!("{} {} vs {}", site.site, other, site.theta_e()));
        }
    }
    let (a, b) = (molora.counts().theta_e, lora.counts().theta_e);
    Ok(verdict(
        mismatched.is_empty() && a == b && lora.len() == molora.len(),
        format!("{} sites, total θ_e {a} vs {b}{}", lora.len(), if mismatched.is_empty() { String::new() } else { format!(", mismatched: {}", mismatched.join("; ")) }),
    ))
}

fn frozen_backbone(pre: &Backbone, moei: &RunOutcome) -> Check {
    let before = Checkpoint::from_bytes(&checkpoint::to_bytes(pre, None, "")?)?;
    let after = Checkpoint::from_bytes(&checkpoint::to_bytes(&moei.model, moei.adapters.as_ref(), "")?)?;
    let (x, y) = (before.section_bytes("backbone"), after.section_bytes("backbone"));
    Ok(verdict(!x.is_empty() && x == y, format!("backbone section {} bytes, identical: {}", x.len(), x == y)))
}

fn gi_delta(o: &RunOutcome) -> f64 {
    o.after.gi_mean() - o.before.gi_mean()
}

fn ei_delta(o: &RunOutcome, f: Facet) -> f64 {
    o.after.ei(f) - o.before.ei(f)
}

fn headline(runs: &HashMap<(Method, u64), RunOutcome>, grid_time: Duration) -> Check {
    let moei = &runs[&(Method::Moei, 0)];
    let ft = &runs[&(Method::Ft, 0)];
    let gains: Vec<f64> = Facet::EI.iter().map(|&f| ei_delta(moei, f)).collect();
    let a = gains.iter().all(|&d| d >= EI_GAIN);
    let order: Vec<(f64, f64)> = SEEDS.iter().map(|&s| (gi_delta(&runs[&(Method::Moei, s)]), gi_delta(&runs[&(Method::Ft, s)]))).collect();
    let b = order.iter().all(|(m, f)| m > f);
    let c = gi_delta(ft) <= -FT_GI_LOSS;
    let fast = grid_time < Duration::from_secs(30 * 60);
    Ok(verdict(
        a && b && c && fast,
        format!(
            "(a) MoEI EI gains {:+.2}/{:+.2}/{:+.2} (need ≥ {EI_GAIN}); (b) ΔGI MoEI vs FT {}; (c) FT ΔGI {:+.3}; grid {:.0}s",
            gains[0],
            gains[1],
            gains[2],
            order.iter().map(|(m, f)| format!("{m:+.3}>{f:+.3}")).collect::<Vec<_>>().join(", "),
            gi_delta(ft),
            grid_time.as_secs_f64()
        ),
    ))
}

fn routing_suppression(runs: &HashMap<(Method, u64), RunOutcome>) -> Check {
    let mut bad = Vec::new();
    let mut worst_gap = f64::INFINITY;
    let mut sites = 0;
    for &s in &SEEDS {
        let Some(stats) = &runs[&(Method::Moei, s)].router else {
            return Ok(verdict(false, format!("seed {s}: no router statistics")));
        };
        for site in stats.sites() {
            sites += 1;
            let (gi, ei) = (stats.domain_beta_sum(site, Domain::Gi), stats.domain_beta_sum(site, Domain::Ei));
            worst_gap = worst_gap.min(ei - gi);
            if gi >= ei {
                bad.push(format!("seed {s} {site}: GI {gi:.3} ≥ EI {ei:.3}"));
            }
        }
    }
    Ok(verdict(
        bad.is_empty() && sites > 0,
        if bad.is_empty() { format!("{sites} site×seed pairs, smallest EI−GI Σβ gap {worst_gap:.3}") } else { bad.join("; ") },
    ))
}

fn ablation_orderings(runs: &HashMap<(Method, u64), RunOutcome>) -> Check {
    let moei = &runs[&(Method::Moei, 0)];
    let inter = &runs[&(Method::MoeiNoInterModulation, 0)];
    let worse_facets = |m: Method| -> Vec<&'static str> {
        Facet::EI.iter().filter(|&&f| runs[&(m, 0)].after.ei(f) < moei.after.ei(f)).map(|f| f.as_str()).collect()
    };
    let mpe = worse_facets(Method::MoeiNoModularExpansion);
    let intra = worse_facets(Method::MoeiNoIntraModulation);
    let gi_ok = gi_delta(inter) < gi_delta(moei);
    Ok(verdict(
        gi_ok && !mpe.is_empty() && !intra.is_empty(),
        format!(
            "−Inter ΔGI {:+.3} vs MoEI {:+.3}; −ModularExpansion lower on [{}]; −IntraModulation lower on [{}]",
            gi_delta(inter),
            gi_delta(moei),
            mpe.join(","),
            intra.join(",")
        ),
    ))
}

/// Exhaustive top-down recursion; independent of the rolling-row table.
fn lcs_oracle(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = if a[a.len() - 1] == b[b.len() - 1] {
        1 + lcs_oracle(&a[..a.len() - 1], &b[..b.len() - 1], memo)
    } else {
        lcs_oracle(&a[..a.len() - 1], b, memo).max(lcs_oracle(a, &b[..b.len() - 1], memo))
    };
    memo.insert(key, v);
    v
}

fn rouge_oracle(cand: &[u8], reference: &[u8]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return if cand.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let lcs = lcs_oracle(cand, reference, &mut HashMap::new()) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, r) = (lcs / cand.len() as f64, lcs / reference.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn rouge_l_oracle() -> Check {
    let mut rng = Rng::new(14);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let alphabet = 1 + rng.below(5) as u8;
        let seq = |rng: &mut Rng| -> Vec<u8> { (0..rng.below(13)).map(|_| rng.below(alphabet as usize) as u8).collect() };
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        let same_len = lcs_len(&a, &b) == lcs_oracle(&a, &b, &mut HashMap::new());
        if !same_len || rouge_l(&a, &b) != rouge_oracle(&a, &b) {
            mismatches += 1;
        }
    }
    Ok(verdict(mismatches == 0, format!("1000 random pairs, {mismatches} mismatches")))
}

fn reproducibility(
    first: &RunOutcome,
    pre: &Backbone,
    bench: &Benchmark,
    cfg: &RunConfig,
    before: &Scores,
) -> Check {
    let again = run_method(first.method, pre, bench, &cfg.adapters, &cfg.train, before)?;
    let csv = |o: &RunOutcome| -> moei::Result<(Vec<u8>, Vec<u8>)> {
        let mut r = ForgettingReport::default();
        r.add(o);
        let stats = o.router.as_ref().expect("gated run");
        Ok((metrics_csv(&r)?, router_csv(stats.n_blocks, &stats.rows.iter().collect::<Vec<_>>())?))
    };
    let same_csv = csv(first)? == csv(&again)?;

    let set = first.adapters.as_ref();
    let ck = Checkpoint::from_bytes(&checkpoint::to_bytes(&first.model, set, &cfg.to_text())?)?;
    let model = ck.backbone()?;
    let loaded: Option<AdapterSet> = ck.adapters_for(&model)?;
    let mut rng = Rng::new(15);
    let mut identical = true;
    for x in random_inputs(&mut rng, model.config(), 20) {
        let a = first.model.logits(&x, set)?;
        let b = model.logits(&x, loaded.as_ref())?;
        identical &= a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    Ok(verdict(same_csv && identical, format!("rerun CSVs byte-identical: {same_csv}; reloaded logits bit-identical: {identical}")))
}

fn main() -> ExitCode {
    let cfg = RunConfig::reference();
    let mut lines: Vec<(usize, &str, moei::Result<Verdict>)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Check| {
        match &v {
            Ok(v) => println!("{} {n:>2}. {name}: {}", if v.ok { "PASS" } else { "FAIL" }, v.detail),
            Err(e) => println!("FAIL {n:>2}. {name}: error: {e}"),
        }
        lines.push((n, name, v));
    };

    report(1, "gradient suite", gradient_suite());
    report(9, "rouge-l oracle", rouge_l_oracle());

    let bench = match Benchmark::generate(&cfg.bench) {
        Ok(b) => b,
        Err(e) => {
            println!("FAIL benchmark generation: {e}");
            return ExitCode::FAILURE;
        }
    };
    let t0 = Instant::now();
    let pre = match pretrain(&cfg.model, &bench, &cfg.train, |_, _| {}) {
        Ok(m) => m,
        Err(e) => {
            println!("FAIL pretraining: {e}");
            return ExitCode::FAILURE;
        }
    };
    let pretrain_time = t0.elapsed();
    report(2, "no-op at init", no_op_at_init(&pre));
    report(3, "gate contracts", gate_contracts(&pre, &bench));
    report(4, "parameter parity", parameter_parity(&pre));

    let run_all = || -> moei::Result<(Scores, HashMap<(Method, u64), RunOutcome>, Duration)> {
        let before = score_all(&pre, None, &bench)?;
        let mut runs = HashMap::new();
        let t = Instant::now();
        for method in Method::ALL {
            runs.insert((method, 0), run_method(method, &pre, &bench, &cfg.adapters, &cfg.train, &before)?);
        }
        let grid = t.elapsed() + pretrain_time;
        for &seed in &SEEDS[1..] {
            for method in [Method::Moei, Method::Ft] {
                let mut train = cfg.train.clone();
                train.seed = seed;
                runs.insert((method, seed), run_method(method, &pre, &bench, &cfg.adapters, &train, &before)?);
            }
        }
        Ok((before, runs, grid))
    };
    match run_all() {
        Ok((before, runs, grid)) => {
            report(5, "frozen backbone", frozen_backbone(&pre, &runs[&(Method::Moei, 0)]));
            report(6, "forgetting analog", headline(&runs, grid));
            report(7, "routing suppression", routing_suppression(&runs));
            report(8, "ablation orderings", ablation_orderings(&runs));
            report(10, "reproducibility and persistence", reproducibility(&runs[&(Method::Moei, 0)], &pre, &bench, &cfg, &before));
        }
        Err(e) => {
            for (n, name) in [(5, "frozen backbone"), (6, "forgetting analog"), (7, "routing suppression"), (8, "ablation orderings"), (10, "reproducibility and persistence")] {
                report(n, name, Err(moei::Error::Contract(format!("training failed: {e}"))));
            }
        }
    }

    let failed = lines.iter().filter(|(_, _, v)| !matches!(v, Ok(v) if v.ok)).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
