//! Before/after tables across methods and seeds, and the replay-size sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tasks::{Facet, MetricKind};
use super::train::{run_method, Method, RunOutcome, Scores, TrainConfig};
use super::Benchmark;
use crate::adapters::AdapterSpec;
use crate::backbone::Backbone;
use crate::error::Result;

pub const EI_MEAN: &str = "ei_mean";
pub const GI_MEAN: &str = "gi_mean";
pub const MEAN_SEED: &str = "mean";
pub const SPREAD_SEED: &str = "sd";

/// One (method, seed, facet) cell. `seed` is a number for single runs and
/// `mean` / `sd` for aggregates over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: String,
    pub facet: String,
    pub metric: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

impl ReportRow {
    fn new(method: &str, seed: &str, facet: &str, metric: &str, before: f64, after: f64) -> Self {
        Self {
            method: method.into(),
            seed: seed.into(),
            facet: facet.into(),
            metric: metric.into(),
            before,
            after,
            delta: after - before,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub rows: Vec<ReportRow>,
}

fn metric_of(facet: Facet) -> MetricKind {
    match facet {
        Facet::Perception | Facet::None => MetricKind::Accuracy,
        Facet::Cognition | Facet::Expression => MetricKind::RougeL,
    }
}

pub fn score_rows(method: &str, seed: &str, before: &Scores, after: &Scores) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (facet, a) in &after.ei {
        rows.push(ReportRow::new(method, seed, facet.as_str(), metric_of(*facet).as_str(), before.ei(*facet), *a));
    }
    for (name, a) in &after.gi {
        rows.push(ReportRow::new(method, seed, name, MetricKind::Accuracy.as_str(), before.gi_family(name), *a));
    }
    rows.push(ReportRow::new(method, seed, EI_MEAN, "mean", before.ei_mean(), after.ei_mean()));
    rows.push(ReportRow::new(method, seed, GI_MEAN, MetricKind::Accuracy.as_str(), before.gi_mean(), after.gi_mean()));
    rows
}

impl ForgettingReport {
    pub fn add(&mut self, outcome: &RunOutcome) {
        self.rows.extend(score_rows(outcome.method.as_str(), &outcome.seed.to_string(), &outcome.before, &outcome.after));
    }

    pub fn get(&self, method: &str, seed: &str, facet: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.seed == seed && r.facet == facet)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn seeds(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.seed) && r.seed != MEAN_SEED && r.seed != SPREAD_SEED {
                out.push(r.seed.clone());
            }
        }
        out
    }

    /// Appends `mean` and `sd` (sample standard deviation; 0 for a single
    /// seed) rows for every (method, facet) seen over more than zero seeds.
    pub fn with_aggregates(&self) -> ForgettingReport {
        let mut groups: BTreeMap<(usize, usize), Vec<&ReportRow>> = BTreeMap::new();
        let methods = self.methods();
        let mut facets: Vec<String> = Vec::new();
        for r in self.rows.iter().filter(|r| r.seed != MEAN_SEED && r.seed != SPREAD_SEED) {
            if !facets.contains(&r.facet) {
                facets.push(r.facet.clone());
            }
            let m = methods.iter().position(|x| *x == r.method).expect("listed");
            let f = facets.iter().position(|x| *x == r.facet).expect("listed");
            groups.entry((m, f)).or_default().push(r);
        }
        let mut rows: Vec<ReportRow> = self.rows.iter().filter(|r| r.seed != MEAN_SEED && r.seed != SPREAD_SEED).cloned().collect();
        for ((m, f), g) in groups {
            let n = g.len() as f64;
            let mean = |sel: fn(&ReportRow) -> f64| g.iter().map(|r| sel(r)).sum::<f64>() / n;
            let sd = |sel: fn(&ReportRow) -> f64| {
                if g.len() < 2 {
                    return 0.0;
                }
                let mu = mean(sel);
                (g.iter().map(|r| (sel(r) - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            let metric = &g[0].metric;
            let mut mrow = ReportRow::new(&methods[m], MEAN_SEED, &facets[f], metric, mean(|r| r.before), mean(|r| r.after));
            mrow.delta = mean(|r| r.delta);
            let srow = ReportRow {
                method: methods[m].clone(),
                seed: SPREAD_SEED.into(),
                facet: facets[f].clone(),
                metric: metric.clone(),
                before: sd(|r| r.before),
                after: sd(|r| r.after),
                delta: sd(|r| r.delta),
            };
            rows.push(mrow);
            rows.push(srow);
        }
        ForgettingReport { rows }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub replay_size: usize,
    pub seed: u64,
    pub gi_after: f64,
    pub delta_gi: f64,
    pub ei_after: f64,
}

/// MoEI and LoRA+Replay at each replay-set size.
pub fn replay_size_sweep(
    sizes: &[usize],
    pretrained: &Backbone,
    bench: &Benchmark,
    adapters: &AdapterSpec,
    cfg: &TrainConfig,
    before: &Scores,
    mut on_run: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        for method in [Method::Moei, Method::LoraReplay] {
            let c = TrainConfig {
                replay_size: size,
                ..cfg.clone()
            };
            let out = run_method(method, pretrained, bench, adapters, &c, before)?;
            let row = SweepRow {
                method: method.as_str().into(),
                replay_size: size,
                seed: cfg.seed,
                gi_after: out.after.gi_mean(),
                delta_gi: out.after.gi_mean() - before.gi_mean(),
                ei_after: out.after.ei_mean(),
            };
            on_run(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(ei: [f64; 3], gi: f64) -> Scores {
        Scores {
            ei: Facet::EI.iter().copied().zip(ei).collect(),
            gi: vec![("kv_recall".into(), gi)],
        }
    }

    #[test]
    fn deltas_are_after_minus_before() {
        let rows = score_rows("MoEI", "0", &scores([0.1, 0.2, 0.3], 0.9), &scores([0.6, 0.5, 0.4], 0.85));
        assert_eq!(rows.len(), 3 + 1 + 2);
        for r in &rows {
            assert_eq!(r.delta, r.after - r.before);
        }
        assert_eq!(rows[1].metric, "rouge_l");
        assert_eq!(rows[0].metric, "accuracy");
    }

    #[test]
    fn aggregates_over_three_seeds() {
        let mut rep = ForgettingReport::default();
        for (seed, gi) in [(0, 0.8), (1, 0.7), (2, 0.9)] {
            rep.rows.extend(score_rows("FT", &seed.to_string(), &scores([0.0; 3], 1.0), &scores([0.5; 3], gi)));
        }
        let agg = rep.with_aggregates();
        let mean = agg.get("FT", MEAN_SEED, "kv_recall").unwrap();
        assert!((mean.after - 0.8).abs() < 1e-12);
        assert!((mean.delta + 0.2).abs() < 1e-12);
        let sd = agg.get("FT", SPREAD_SEED, "kv_recall").unwrap();
        assert!((sd.after - 0.1).abs() < 1e-12);
        assert_eq!(agg.seeds(), vec!["0", "1", "2"]);
        // idempotent
        assert_eq!(agg.with_aggregates(), agg);
    }
}
