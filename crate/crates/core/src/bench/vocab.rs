//! Fixed 512-symbol vocabulary. Ids below 32 are shared schema tokens,
//! 32..256 belong only to general-intelligence families and 256..512 only
//! to the emotional-intelligence facets, so the two domains never share
//! surface symbols.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 512;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const INPUT: usize = 3;
pub const OPTIONS: usize = 4;
pub const ANSWER: usize = 5;

pub const INSTR: Range<usize> = 8..32;

pub const GI_REGION: Range<usize> = 32..256;
pub const KEYS: Range<usize> = 32..80;
pub const VALUES: Range<usize> = 80..112;
pub const DIGITS: Range<usize> = 112..117;
pub const PLUS: usize = 117;
pub const YES: usize = 118;
pub const NO: usize = 119;
pub const GREATER: usize = 120;
pub const GI_NOISE: Range<usize> = 152..184;

pub const EI_REGION: Range<usize> = 256..512;
pub const LABELS: Range<usize> = 256..260;
pub const CUES: Range<usize> = 260..284;
pub const FILLERS: Range<usize> = 284..332;
pub const TRIGGER: usize = 332;
pub const SPANS: Range<usize> = 336..344;
pub const RESPONSES: Range<usize> = 384..392;

pub const CUES_PER_LABEL: usize = 6;

struct Table {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

fn table() -> &'static Table {
    static T: OnceLock<Table> = OnceLock::new();
    T.get_or_init(|| {
        let names: Vec<String> = (0..VOCAB_SIZE).map(raw_name).collect();
        let ids = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Table { names, ids }
    })
}

fn raw_name(id: usize) -> String {
    let within = |r: &Range<usize>| r.contains(&id);
    match id {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        INPUT => "<input>".into(),
        OPTIONS => "<options>".into(),
        ANSWER => "<answer>".into(),
        PLUS => "+".into(),
        YES => "yes".into(),
        NO => "no".into(),
        GREATER => ">".into(),
        TRIGGER => "<cause>".into(),
        _ if within(&INSTR) => format!("ins{:02}", id - INSTR.start),
        _ if within(&KEYS) => format!("key{:02}", id - KEYS.start),
        _ if within(&VALUES) => format!("val{:02}", id - VALUES.start),
        _ if within(&DIGITS) => format!("d{}", id - DIGITS.start),
        _ if within(&GI_NOISE) => format!("gn{:02}", id - GI_NOISE.start),
        _ if within(&LABELS) => format!("lab{}", id - LABELS.start),
        _ if within(&CUES) => format!("cue{:02}", id - CUES.start),
        _ if within(&FILLERS) => format!("ef{:02}", id - FILLERS.start),
        _ if within(&SPANS) => format!("sp{:02}", id - SPANS.start),
        _ if within(&RESPONSES) => format!("rw{}", id - RESPONSES.start),
        _ => format!("u{id:03}"),
    }
}

pub fn name(id: usize) -> &'static str {
    table().names.get(id).map_or("<oov>", String::as_str)
}

pub fn id(name: &str) -> Result<usize> {
    table()
        .ids
        .get(name)
        .copied()
        .ok_or_else(|| Error::Parse(format!("unknown token `{name}`")))
}

pub fn render(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| name(t)).collect::<Vec<_>>().join(" ")
}

pub fn parse(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(id).collect()
}

pub fn cue_label(cue: usize) -> usize {
    LABELS.start + (cue - CUES.start) / CUES_PER_LABEL
}

pub fn label_cues(label: usize) -> Range<usize> {
    let l = label - LABELS.start;
    CUES.start + l * CUES_PER_LABEL..CUES.start + (l + 1) * CUES_PER_LABEL
}

pub fn label_responses(label: usize) -> [usize; 2] {
    let l = label - LABELS.start;
    [RESPONSES.start + 2 * l, RESPONSES.start + 2 * l + 1]
}
