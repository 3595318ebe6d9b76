//! Metrics and router tables as CSV / JSON files with fixed column order.
//! Every file is written to a temporary sibling and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::report::{ForgettingReport, ReportRow, SweepRow};
use crate::bench::stats::{RouterRow, RouterStats};
use crate::error::{Error, Result};

pub const METRIC_COLUMNS: [&str; 7] = ["method", "seed", "facet", "metric", "before", "after", "delta"];

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn csv_bytes<T: Serialize>(rows: &[T], header: Option<&[String]>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header.is_none()).from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h).map_err(|e| Error::Parse(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

pub fn metrics_csv(report: &ForgettingReport) -> Result<Vec<u8>> {
    if report.rows.is_empty() {
        let mut out = METRIC_COLUMNS.join(",");
        out.push('\n');
        return Ok(out.into_bytes());
    }
    csv_bytes(&report.rows, None)
}

pub fn parse_metrics_csv(bytes: &[u8]) -> Result<ForgettingReport> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(METRIC_COLUMNS) {
        return Err(Error::Parse(format!("expected columns {}", METRIC_COLUMNS.join(","))));
    }
    let rows = r
        .deserialize::<ReportRow>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    Ok(ForgettingReport { rows })
}

pub fn write_metrics_csv(path: &Path, report: &ForgettingReport) -> Result<()> {
    write_atomic(path, &metrics_csv(report)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<ForgettingReport> {
    parse_metrics_csv(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// One line per (site, dataset): `site,dataset,alpha,beta_1..beta_N`.
pub fn router_csv(n_blocks: usize, rows: &[&RouterRow]) -> Result<Vec<u8>> {
    let mut header: Vec<String> = vec!["site".into(), "dataset".into(), "alpha".into()];
    header.extend((1..=n_blocks).map(|i| format!("beta_{i}")));
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.site.to_string(), r.dataset.clone(), r.alpha.to_string()];
        rec.extend(r.betas.iter().map(f64::to_string));
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

/// `(site, dataset, [alpha, beta_1..])` records of a router CSV.
pub fn parse_router_csv(bytes: &[u8]) -> Result<Vec<(String, String, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let vals = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("not a number: `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((rec[0].to_string(), rec[1].to_string(), vals));
    }
    Ok(out)
}

/// Writes `<stem>.router.csv` (every site) and `<stem>.router_last_ffn.csv`
/// into `dir`.
pub fn write_router_stats(dir: &Path, stem: &str, stats: &RouterStats) -> Result<Vec<PathBuf>> {
    let all: Vec<&RouterRow> = stats.rows.iter().collect();
    let a = dir.join(format!("{stem}.router.csv"));
    write_atomic(&a, &router_csv(stats.n_blocks, &all)?)?;
    let b = dir.join(format!("{stem}.router_last_ffn.csv"));
    write_atomic(&b, &router_csv(stats.n_blocks, &stats.last_ffn_rows())?)?;
    Ok(vec![a, b])
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    csv_bytes(rows, None)
}

pub fn parse_sweep_csv(bytes: &[u8]) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{SiteId, SiteKind};
    use crate::bench::report::{score_rows, MEAN_SEED, SPREAD_SEED};
    use crate::bench::tasks::{Domain, Facet};
    use crate::bench::train::Scores;

    fn scores(x: f64) -> Scores {
        Scores {
            ei: Facet::EI.iter().map(|f| (*f, x / 3.0)).collect(),
            gi: vec![("kv_recall".into(), 1.0 - x / 7.0), ("compare".into(), 0.1 + x)],
        }
    }

    #[test]
    fn metrics_csv_roundtrips_with_aggregates() {
        let mut rep = ForgettingReport::default();
        for seed in 0..3 {
            rep.rows.extend(score_rows("MoEI", &seed.to_string(), &scores(0.0), &scores(0.1 * seed as f64 + 0.123456789)));
        }
        let rep = rep.with_aggregates();
        assert!(rep.rows.iter().any(|r| r.seed == MEAN_SEED) && rep.rows.iter().any(|r| r.seed == SPREAD_SEED));
        let bytes = metrics_csv(&rep).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("method,seed,facet,metric,before,after,delta\n"));
        assert_eq!(parse_metrics_csv(&bytes).unwrap(), rep);
        assert_eq!(metrics_csv(&parse_metrics_csv(&bytes).unwrap()).unwrap(), bytes);
        assert!(parse_metrics_csv(b"a,b\n1,2\n").is_err());
        assert_eq!(parse_metrics_csv(&metrics_csv(&ForgettingReport::default()).unwrap()).unwrap().rows.len(), 0);
    }

    #[test]
    fn router_csv_has_n_plus_one_values() {
        let row = RouterRow {
            site: SiteId::new(1, SiteKind::FfnDown),
            dataset: "compare".into(),
            domain: Domain::Gi,
            tokens: 10,
            alpha: 0.5,
            betas: vec![0.25, 0.125, 0.125],
        };
        let bytes = router_csv(3, &[&row]).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "site,dataset,alpha,beta_1,beta_2,beta_3");
        let parsed = parse_router_csv(&bytes).unwrap();
        assert_eq!(parsed, vec![("layer1.ffn_down".into(), "compare".into(), vec![0.5, 0.25, 0.125, 0.125])]);
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.json");
        write_json(&p, &vec![1, 2]).unwrap();
        write_json(&p, &vec![3]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "[\n  3\n]\n");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn sweep_csv_roundtrips() {
        let rows = vec![SweepRow {
            method: "MoEI".into(),
            replay_size: 50,
            seed: 2,
            gi_after: 0.9,
            delta_gi: -0.1,
            ei_after: 0.7,
        }];
        assert_eq!(parse_sweep_csv(&sweep_csv(&rows).unwrap()).unwrap(), rows);
    }
}
