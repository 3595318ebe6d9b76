//! Line-delimited dataset files.
//!
//! The first line is a header `{"format":"moei-tasks","version":1}`; every
//! following line is one record with the fields `instruction`, `input`,
//! `options` (omitted when absent), `target`, `domain`, `facet`, `task`.
//! Token sequences are written as space-separated symbol names.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::tasks::TaskSample;
use super::vocab;
use crate::error::{Error, Result};

pub const FORMAT: &str = "moei-tasks";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    instruction: String,
    input: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    options: Option<String>,
    target: String,
    domain: String,
    facet: String,
    task: String,
}

pub fn to_record(s: &TaskSample) -> String {
    let r = Record {
        instruction: vocab::render(&s.instruction),
        input: vocab::render(&s.input),
        options: s.options.as_deref().map(vocab::render),
        target: vocab::render(&s.target),
        domain: s.domain.to_string(),
        facet: s.facet.to_string(),
        task: s.task.clone(),
    };
    serde_json::to_string(&r).expect("plain record serializes")
}

pub fn from_record(line: &str) -> Result<TaskSample> {
    let r: Record = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
    let s = TaskSample {
        instruction: vocab::parse(&r.instruction)?,
        input: vocab::parse(&r.input)?,
        options: r.options.as_deref().map(vocab::parse).transpose()?,
        target: vocab::parse(&r.target)?,
        domain: r.domain.parse()?,
        facet: r.facet.parse()?,
        task: r.task,
    };
    s.validate()?;
    Ok(s)
}

pub fn write_samples<W: Write>(mut w: W, samples: &[TaskSample]) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for s in samples {
        writeln!(w, "{}", to_record(s))?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<TaskSample>> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
    let first = first.map_err(|e| Error::Parse(e.to_string()))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Parse(format!("not a {FORMAT} file (format `{}`)", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.version,
            expected: VERSION,
        });
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_record(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::tasks::{gen_ei_tasks, gen_gi_tasks, SplitSizes};

    #[test]
    fn every_generated_sample_round_trips() {
        let sizes = SplitSizes { train: 200, eval: 50 };
        let mut all = Vec::new();
        for fam in gen_gi_tasks(9, sizes).unwrap().into_iter().chain(gen_ei_tasks(9, sizes).unwrap()) {
            all.extend(fam.train);
            all.extend(fam.eval);
        }
        let mut buf = Vec::new();
        write_samples(&mut buf, &all).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), all);
    }

    #[test]
    fn options_field_is_omitted_when_absent() {
        let sizes = SplitSizes { train: 1, eval: 1 };
        let gi = &gen_gi_tasks(1, sizes).unwrap()[0].train[0];
        assert!(!to_record(gi).contains("options"));
        let ei = &gen_ei_tasks(1, sizes).unwrap()[0].train[0];
        assert!(to_record(ei).contains("\"options\""));
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(read_samples(&b""[..]).is_err());
        let v2 = b"{\"format\":\"moei-tasks\",\"version\":2}\n";
        assert!(matches!(read_samples(&v2[..]), Err(Error::UnsupportedVersion { found: 2, .. })));
        let extra = b"{\"format\":\"moei-tasks\",\"version\":1}\n{\"instruction\":\"\",\"input\":\"\",\"target\":\"yes\",\"domain\":\"gi\",\"facet\":\"none\",\"task\":\"t\",\"x\":1}\n";
        assert!(read_samples(&extra[..]).is_err());
        let bad_facet = b"{\"format\":\"moei-tasks\",\"version\":1}\n{\"instruction\":\"\",\"input\":\"\",\"target\":\"yes\",\"domain\":\"gi\",\"facet\":\"cognition\",\"task\":\"t\"}\n";
        assert!(read_samples(&bad_facet[..]).is_err());
    }
}
