//! Synthetic two-domain benchmark, metrics, and the experiment drivers.

pub mod metrics;
pub mod report;
pub mod schema;
pub mod stats;
pub mod tasks;
pub mod train;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use tasks::{gen_ei_tasks, gen_gi_tasks, Facet, SplitSizes, TaskFamily, TaskSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Seed of the task corpora (independent of the training seed).
    pub seed: u64,
    pub gi_train: usize,
    pub gi_eval: usize,
    pub ei_train: usize,
    pub ei_eval: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            gi_train: 3000,
            gi_eval: 100,
            ei_train: 1000,
            ei_eval: 100,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("bench.gi_train", self.gi_train),
            ("bench.gi_eval", self.gi_eval),
            ("bench.ei_train", self.ei_train),
            ("bench.ei_eval", self.ei_eval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be ≥ 1")));
            }
        }
        Ok(())
    }
}

/// Every family with its splits, generated once per bench seed.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: BenchConfig,
    pub gi: Vec<TaskFamily>,
    pub ei: Vec<TaskFamily>,
}

impl Benchmark {
    pub fn generate(config: &BenchConfig) -> Result<Self> {
        config.validate()?;
        let gi = gen_gi_tasks(
            config.seed,
            SplitSizes {
                train: config.gi_train,
                eval: config.gi_eval,
            },
        )?;
        let ei = gen_ei_tasks(
            config.seed,
            SplitSizes {
                train: config.ei_train,
                eval: config.ei_eval,
            },
        )?;
        Ok(Self {
            config: config.clone(),
            gi,
            ei,
        })
    }

    pub fn families(&self) -> impl Iterator<Item = &TaskFamily> {
        self.ei.iter().chain(&self.gi)
    }

    pub fn gi_train(&self) -> Vec<TaskSample> {
        self.gi.iter().flat_map(|f| f.train.iter().cloned()).collect()
    }

    pub fn ei_train(&self) -> Vec<TaskSample> {
        self.ei.iter().flat_map(|f| f.train.iter().cloned()).collect()
    }

    pub fn ei_family(&self, facet: Facet) -> Option<&TaskFamily> {
        self.ei.iter().find(|f| f.facet == facet)
    }

    /// `size` samples drawn without replacement from the GI training
    /// corpus, i.e. the data the backbone was pretrained on.
    pub fn replay_set(&self, size: usize, seed: u64) -> Vec<TaskSample> {
        let mut pool = self.gi_train();
        let mut rng = Rng::new(seed).fork("replay");
        rng.shuffle(&mut pool);
        pool.truncate(size);
        pool
    }
}
