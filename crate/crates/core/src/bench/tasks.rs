//! Synthetic task families in the instruction / input / option / target
//! schema.
//!
//! General-intelligence (GI) families are what the backbone is pretrained
//! on: fact lookup against a fixed seeded table, a modular addition chain,
//! and a digit comparison. Emotional-intelligence (EI) facets are what the
//! adaptation methods learn: label classification with an option list,
//! span extraction after a trigger, and a label-conditioned templated reply.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::*;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Label value for positions that carry no loss.
pub const IGNORE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Ei,
    Gi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Perception,
    Cognition,
    Expression,
    None,
}

impl Facet {
    pub const EI: [Facet; 3] = [Facet::Perception, Facet::Cognition, Facet::Expression];

    pub fn as_str(self) -> &'static str {
        match self {
            Facet::Perception => "perception",
            Facet::Cognition => "cognition",
            Facet::Expression => "expression",
            Facet::None => "none",
        }
    }
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Ei => "ei",
            Domain::Gi => "gi",
        }
    }
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Facet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Facet::Perception, Facet::Cognition, Facet::Expression, Facet::None]
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown facet `{s}`")))
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ei" => Ok(Domain::Ei),
            "gi" => Ok(Domain::Gi),
            _ => Err(Error::Parse(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSample {
    pub instruction: Vec<usize>,
    pub input: Vec<usize>,
    pub options: Option<Vec<usize>>,
    pub target: Vec<usize>,
    pub domain: Domain,
    pub facet: Facet,
    pub task: String,
}

/// A sample laid out for teacher forcing. `labels[i]` is the token that
/// should follow `tokens[i]`, or [`IGNORE`] outside the answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl TaskSample {
    pub fn validate(&self) -> Result<()> {
        if self.domain == Domain::Gi && self.facet != Facet::None {
            return Err(Error::Contract(format!("GI sample `{}` carries facet {}", self.task, self.facet)));
        }
        if self.domain == Domain::Ei && self.facet == Facet::None {
            return Err(Error::Contract(format!("EI sample `{}` has no facet", self.task)));
        }
        if let Some(opts) = &self.options {
            if self.target.len() != 1 || !opts.contains(&self.target[0]) {
                return Err(Error::Contract(format!("target of `{}` is not among its options", self.task)));
            }
        }
        if self.target.is_empty() {
            return Err(Error::Contract(format!("empty target in `{}`", self.task)));
        }
        Ok(())
    }

    /// `<bos> instruction <input> input [<options> options] <answer>`
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = vec![BOS];
        p.extend(&self.instruction);
        p.push(INPUT);
        p.extend(&self.input);
        if let Some(o) = &self.options {
            p.push(OPTIONS);
            p.extend(o);
        }
        p.push(ANSWER);
        p
    }

    pub fn encode(&self) -> Encoded {
        let prompt = self.prompt();
        let mut full = prompt.clone();
        full.extend(&self.target);
        full.push(EOS);
        let tokens = full[..full.len() - 1].to_vec();
        let labels = (0..tokens.len())
            .map(|i| if i + 1 >= prompt.len() { full[i + 1] } else { IGNORE })
            .collect();
        Encoded { tokens, labels }
    }

    /// Single-line text form; two samples are the same sample iff their
    /// keys are equal.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.task,
            render(&self.instruction),
            render(&self.input),
            self.options.as_deref().map(render).unwrap_or_default(),
            render(&self.target)
        )
    }
}

/// How a family is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    RougeL,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::RougeL => "rouge_l",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskFamily {
    pub name: String,
    pub domain: Domain,
    pub facet: Facet,
    pub metric: MetricKind,
    pub train: Vec<TaskSample>,
    pub eval: Vec<TaskSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub eval: usize,
}

type Sampler<'a> = dyn Fn(&mut Rng) -> TaskSample + 'a;

/// Draws train then eval samples from independent streams. Duplicates are
/// dropped inside a split and eval rejects anything already in train.
fn build_family(
    name: &str,
    domain: Domain,
    facet: Facet,
    metric: MetricKind,
    seed_rng: &Rng,
    sizes: SplitSizes,
    sample: &Sampler<'_>,
) -> Result<TaskFamily> {
    let mut seen = HashSet::new();
    let mut draw = |label: &str, n: usize| -> Result<Vec<TaskSample>> {
        let mut rng = seed_rng.fork(&format!("{name}/{label}"));
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(Error::Config(format!(
                    "family {name} cannot produce {n} distinct {label} samples"
                )));
            }
            let s = sample(&mut rng);
            if seen.insert(s.key()) {
                out.push(s);
            }
        }
        Ok(out)
    };
    let train = draw("train", sizes.train)?;
    let eval = draw("eval", sizes.eval)?;
    Ok(TaskFamily {
        name: name.into(),
        domain,
        facet,
        metric,
        train,
        eval,
    })
}

fn pick(rng: &mut Rng, r: std::ops::Range<usize>) -> usize {
    r.start + rng.below(r.len())
}

fn distinct(rng: &mut Rng, r: std::ops::Range<usize>, n: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = r.collect();
    rng.shuffle(&mut pool);
    pool.truncate(n);
    pool
}

/// The fixed key → value table the fact-lookup family asks about.
pub fn fact_table(seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed).fork("facts");
    KEYS.map(|_| pick(&mut rng, VALUES)).collect()
}

fn gi(task: &str, instr: [usize; 2], input: Vec<usize>, target: Vec<usize>) -> TaskSample {
    TaskSample {
        instruction: instr.to_vec(),
        input,
        options: None,
        target,
        domain: Domain::Gi,
        facet: Facet::None,
        task: task.into(),
    }
}

fn ei(task: &str, facet: Facet, instr: [usize; 2], input: Vec<usize>, options: Option<Vec<usize>>, target: Vec<usize>) -> TaskSample {
    TaskSample {
        instruction: instr.to_vec(),
        input,
        options,
        target,
        domain: Domain::Ei,
        facet,
        task: task.into(),
    }
}

fn kv_recall(rng: &mut Rng, facts: &[usize]) -> TaskSample {
    let k = pick(rng, KEYS);
    let mut input: Vec<usize> = (0..1 + rng.below(3)).map(|_| pick(rng, GI_NOISE)).collect();
    let at = rng.below(input.len() + 1);
    input.insert(at, k);
    gi("kv_recall", [8, 9], input, vec![facts[k - KEYS.start]])
}

/// `a + b + c (mod 5)` answered as the chain of partial sums.
fn mod_chain(rng: &mut Rng) -> TaskSample {
    let ds: Vec<usize> = (0..3).map(|_| rng.below(DIGITS.len())).collect();
    let mut input = vec![DIGITS.start + ds[0], PLUS, DIGITS.start + ds[1], PLUS, DIGITS.start + ds[2]];
    input.extend((0..rng.below(3)).map(|_| pick(rng, GI_NOISE)));
    let first = (ds[0] + ds[1]) % DIGITS.len();
    let second = (first + ds[2]) % DIGITS.len();
    gi("mod_chain", [10, 11], input, vec![DIGITS.start + first, DIGITS.start + second])
}

/// Is the first digit greater than the second?
fn compare(rng: &mut Rng) -> TaskSample {
    let (a, b) = (rng.below(DIGITS.len()), rng.below(DIGITS.len()));
    let mut input = vec![DIGITS.start + a, GREATER, DIGITS.start + b];
    input.extend((0..rng.below(3)).map(|_| pick(rng, GI_NOISE)));
    gi("compare", [12, 13], input, vec![if a > b { YES } else { NO }])
}

fn cue_input(rng: &mut Rng, label: usize, n_fillers: usize) -> Vec<usize> {
    let mut input = distinct(rng, label_cues(label), 2);
    input.extend((0..n_fillers).map(|_| pick(rng, FILLERS)));
    rng.shuffle(&mut input);
    input
}

fn perception(rng: &mut Rng) -> TaskSample {
    let label = pick(rng, LABELS);
    let input = cue_input(rng, label, 3);
    let mut options: Vec<usize> = LABELS.collect();
    rng.shuffle(&mut options);
    ei("affect_label", Facet::Perception, [16, 17], input, Some(options), vec![label])
}

fn cognition(rng: &mut Rng) -> TaskSample {
    let span = distinct(rng, SPANS, 2);
    let mut input: Vec<usize> = (0..1 + rng.below(3)).map(|_| pick(rng, FILLERS)).collect();
    input.push(TRIGGER);
    input.extend(&span);
    input.extend((0..rng.below(2)).map(|_| pick(rng, FILLERS)));
    ei("cause_span", Facet::Cognition, [18, 19], input, None, span)
}

fn expression(rng: &mut Rng) -> TaskSample {
    let label = pick(rng, LABELS);
    let input = cue_input(rng, label, 2);
    let first_cue = *input.iter().find(|t| CUES.contains(t)).expect("two cues");
    let [w0, w1] = label_responses(label);
    ei("templated_reply", Facet::Expression, [20, 21], input, None, vec![w0, w1, first_cue])
}

/// kv_recall, mod_chain and compare, all derived from `seed`.
pub fn gen_gi_tasks(seed: u64, sizes: SplitSizes) -> Result<Vec<TaskFamily>> {
    let root = Rng::new(seed).fork("gi");
    let facts = fact_table(seed);
    Ok(vec![
        build_family("kv_recall", Domain::Gi, Facet::None, MetricKind::Accuracy, &root, sizes, &|r| kv_recall(r, &facts))?,
        build_family("mod_chain", Domain::Gi, Facet::None, MetricKind::Accuracy, &root, sizes, &mod_chain)?,
        build_family("compare", Domain::Gi, Facet::None, MetricKind::Accuracy, &root, sizes, &compare)?,
    ])
}

/// One family per EI facet, in perception / cognition / expression order.
pub fn gen_ei_tasks(seed: u64, sizes: SplitSizes) -> Result<Vec<TaskFamily>> {
    let root = Rng::new(seed).fork("ei");
    Ok(vec![
        build_family("affect_label", Domain::Ei, Facet::Perception, MetricKind::Accuracy, &root, sizes, &perception)?,
        build_family("cause_span", Domain::Ei, Facet::Cognition, MetricKind::RougeL, &root, sizes, &cognition)?,
        build_family("templated_reply", Domain::Ei, Facet::Expression, MetricKind::RougeL, &root, sizes, &expression)?,
    ])
}
