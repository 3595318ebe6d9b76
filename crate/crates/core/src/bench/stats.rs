//! Mean gate values per adapted site and per evaluation set.

use serde::{Deserialize, Serialize};

use super::tasks::Domain;
use super::Benchmark;
use crate::adapters::AdapterSet;
use crate::autodiff::{Graph, Scalar};
use crate::backbone::{Backbone, Batch, ForwardCtx, SiteId, SiteKind};
use crate::error::{Error, Result};

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterRow {
    pub site: SiteId,
    pub dataset: String,
    pub domain: Domain,
    pub tokens: usize,
    /// Mean softmax mass on the backbone slot (before the forward clamp).
    pub alpha: f64,
    pub betas: Vec<f64>,
}

impl RouterRow {
    pub fn beta_sum(&self) -> f64 {
        self.betas.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub n_blocks: usize,
    pub rows: Vec<RouterRow>,
}

impl RouterStats {
    pub fn sites(&self) -> Vec<SiteId> {
        let mut s: Vec<SiteId> = self.rows.iter().map(|r| r.site).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn row(&self, site: SiteId, dataset: &str) -> Option<&RouterRow> {
        self.rows.iter().find(|r| r.site == site && r.dataset == dataset)
    }

    /// Token-weighted mean Σβ over every dataset of `domain` at `site`.
    pub fn domain_beta_sum(&self, site: SiteId, domain: Domain) -> f64 {
        let (num, den) = self
            .rows
            .iter()
            .filter(|r| r.site == site && r.domain == domain)
            .fold((0.0, 0usize), |(n, d), r| (n + r.beta_sum() * r.tokens as f64, d + r.tokens));
        num / den.max(1) as f64
    }

    /// The feed-forward down-projection of the deepest adapted layer.
    pub fn last_ffn_site(&self) -> Option<SiteId> {
        self.sites().into_iter().filter(|s| s.kind == SiteKind::FfnDown).max_by_key(|s| s.layer)
    }

    pub fn last_ffn_rows(&self) -> Vec<&RouterRow> {
        match self.last_ffn_site() {
            Some(site) => self.rows.iter().filter(|r| r.site == site).collect(),
            None => Vec::new(),
        }
    }

    /// Fixed-width table of the last-layer FFN site: one line per dataset,
    /// α then β₁..β_N with two decimals.
    pub fn summary_table(&self) -> String {
        let mut out = String::from("dataset");
        out.push_str("\talpha");
        for i in 1..=self.n_blocks {
            out.push_str(&format!("\tbeta_{i}"));
        }
        out.push('\n');
        for r in self.last_ffn_rows() {
            out.push_str(&r.dataset);
            out.push_str(&format!("\t{:.2}", r.alpha));
            for b in &r.betas {
                out.push_str(&format!("\t{b:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Gate means over every token (prompt and answer, teacher-forced) of each
/// evaluation split.
pub fn router_stats<S: Scalar>(model: &Backbone<S>, adapters: &AdapterSet<S>, bench: &Benchmark) -> Result<RouterStats> {
    if !adapters.has_router() {
        return Err(Error::Contract("router statistics need gated adapters".into()));
    }
    let n = adapters.sites().find_map(|s| s.router.as_ref().map(|_| s.n_blocks)).unwrap_or(0);
    let mut rows = Vec::new();
    for fam in bench.families() {
        let mut sums: Vec<(SiteId, Vec<f64>)> = Vec::new();
        let mut tokens = 0usize;
        for chunk in fam.eval.chunks(CHUNK) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|s| s.encode().tokens).collect();
            let batch = Batch::new(&seqs);
            tokens += batch.rows();
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval(Some(adapters));
            model.hidden(&mut g, &batch, &mut ctx)?;
            for (i, (site, logits)) in ctx.router_logits.iter().enumerate() {
                let p = g.softmax(*logits, 1)?;
                let vals = g.value(p);
                if sums.len() <= i {
                    sums.push((*site, vec![0.0; n + 1]));
                }
                for (c, acc) in sums[i].1.iter_mut().enumerate() {
                    *acc += (0..batch.rows()).map(|r| vals[r * (n + 1) + c].to_f64().unwrap_or(f64::NAN)).sum::<f64>();
                }
            }
        }
        for (site, s) in sums {
            rows.push(RouterRow {
                site,
                dataset: fam.name.clone(),
                domain: fam.domain,
                tokens,
                alpha: s[0] / tokens as f64,
                betas: s[1..].iter().map(|v| v / tokens as f64).collect(),
            });
        }
    }
    Ok(RouterStats { n_blocks: n, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{inject, AdapterSpec};
    use crate::backbone::ModelConfig;
    use crate::bench::BenchConfig;
    use crate::rng::Rng;

    #[test]
    fn untrained_router_is_uniform() {
        let bench = Benchmark::generate(&BenchConfig {
            seed: 1,
            gi_train: 4,
            gi_eval: 5,
            ei_train: 4,
            ei_eval: 5,
        })
        .unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let model = Backbone::<f32>::new(cfg, &mut Rng::new(1)).unwrap();
        let set = inject(&model, &AdapterSpec::default(), &mut Rng::new(2)).unwrap();
        let stats = router_stats(&model, &set, &bench).unwrap();
        assert_eq!(stats.rows.len(), 6 * 6);
        for r in &stats.rows {
            assert!((r.alpha - 1.0 / 9.0).abs() < 1e-6);
            assert!(r.betas.iter().all(|b| (b - 1.0 / 9.0).abs() < 1e-6));
            assert!((r.alpha + r.beta_sum() - 1.0).abs() < 1e-4);
        }
        assert_eq!(stats.last_ffn_site(), Some(SiteId::new(1, SiteKind::FfnDown)));
        assert_eq!(stats.last_ffn_rows().len(), 6);
        let table = stats.summary_table();
        assert_eq!(table.lines().count(), 7);
        assert!(table.lines().nth(1).unwrap().contains("0.11"));
        let lora = inject(&model, &AdapterSpec::lora(4), &mut Rng::new(2)).unwrap();
        assert!(router_stats(&model, &lora, &bench).is_err());
    }
}
