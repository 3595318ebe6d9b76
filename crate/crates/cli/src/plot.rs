//! SVG charts of the exported CSVs.

use std::path::{Path, PathBuf};

use moei::bench::report::{ForgettingReport, EI_MEAN, GI_MEAN, MEAN_SEED};
use moei::bench::report::SweepRow;
use moei::export::{parse_metrics_csv, parse_router_csv, parse_sweep_csv};
use moei::Error;
use plotters::prelude::*;

const SIZE: (u32, u32) = (900, 520);

fn draw_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Contract(format!("drawing {}: {e:?}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Renders every recognized CSV in `input` into `output`; returns the SVGs.
pub fn render_dir(input: &Path, output: &Path) -> Result<Vec<PathBuf>, Error> {
    let entries = std::fs::read_dir(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut names: Vec<String> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    std::fs::create_dir_all(output).map_err(|e| Error::Io {
        path: output.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for name in names {
        let src = input.join(&name);
        if let Some(stem) = name.strip_suffix(".metrics.csv") {
            let dst = output.join(format!("{stem}.metrics.svg"));
            metrics_chart(&parse_metrics_csv(&read(&src)?)?, stem, &dst)?;
            out.push(dst);
        } else if let Some(stem) = name.strip_suffix(".router_last_ffn.csv") {
            let dst = output.join(format!("{stem}.router.svg"));
            router_chart(&parse_router_csv(&read(&src)?)?, stem, &dst)?;
            out.push(dst);
        } else if name == "sweep.csv" {
            let dst = output.join("sweep.svg");
            sweep_chart(&parse_sweep_csv(&read(&src)?)?, &dst)?;
            out.push(dst);
        }
    }
    Ok(out)
}

/// Per method: change in EI mean and GI mean (seed means when present).
fn metrics_chart(report: &ForgettingReport, title: &str, path: &Path) -> Result<(), Error> {
    let seed = if report.rows.iter().any(|r| r.seed == MEAN_SEED) {
        MEAN_SEED.to_string()
    } else {
        report.seeds().first().cloned().unwrap_or_default()
    };
    let methods = report.methods();
    let bars: Vec<(f64, f64)> = methods
        .iter()
        .map(|m| {
            let d = |facet| report.get(m, &seed, facet).map_or(0.0, |r| r.delta);
            (d(EI_MEAN), d(GI_MEAN))
        })
        .collect();
    let lo = bars.iter().flat_map(|(a, b)| [*a, *b]).fold(0.0f64, f64::min) - 0.05;
    let hi = bars.iter().flat_map(|(a, b)| [*a, *b]).fold(0.0f64, f64::max) + 0.05;
    let err = draw_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let n = methods.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title}: change after adaptation (seed {seed})"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(90)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..n as f64, lo..hi)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 0.26 {
                methods.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("after - before")
        .draw()
        .map_err(&err)?;
    let series = [("EI mean", BLUE.mix(0.8), 0), ("GI mean", RED.mix(0.8), 1)];
    for (label, color, k) in series {
        chart
            .draw_series(bars.iter().enumerate().map(|(i, pair)| {
                let v = if k == 0 { pair.0 } else { pair.1 };
                let x0 = i as f64 + 0.1 + 0.4 * k as f64;
                Rectangle::new([(x0, 0.0), (x0 + 0.38, v)], color.filled())
            }))
            .map_err(&err)?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart.draw_series(LineSeries::new([(0.0, 0.0), (n as f64, 0.0)], BLACK)).map_err(&err)?;
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// GI accuracy after adaptation against the replay-set size, per method.
fn sweep_chart(rows: &[SweepRow], path: &Path) -> Result<(), Error> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let max_size = rows.iter().map(|r| r.replay_size).max().unwrap_or(1).max(1) as f64;
    let err = draw_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("GI retention against replay-set size", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..max_size, 0f64..1.05)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("replay samples").y_desc("GI accuracy").draw().map_err(&err)?;
    for (i, m) in methods.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut pts: Vec<(f64, f64)> =
            rows.iter().filter(|r| r.method == *m).map(|r| (r.replay_size as f64, r.gi_after)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(&err)?
            .label(*m)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled()))).map_err(&err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// Heat map of mean gate values: one row per dataset, columns α, β₁..β_N.
fn router_chart(rows: &[(String, String, Vec<f64>)], title: &str, path: &Path) -> Result<(), Error> {
    let cols = rows.first().map_or(1, |r| r.2.len()).max(1);
    let n_rows = rows.len().max(1);
    let err = draw_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let site = rows.first().map_or("", |r| r.0.as_str());
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title}: gate means at {site}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(120)
        .build_cartesian_2d(0f64..cols as f64, 0f64..n_rows as f64)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(cols * 2 + 1)
        .y_labels(n_rows * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            match ((x - i as f64 - 0.5).abs() < 0.26, i) {
                (false, _) => String::new(),
                (true, 0) => "alpha".into(),
                (true, i) => format!("beta_{i}"),
            }
        })
        .y_label_formatter(&|y| {
            let i = y.floor() as usize;
            if (y - i as f64 - 0.5).abs() < 0.26 {
                rows.get(n_rows - 1 - i).map_or(String::new(), |r| r.1.clone())
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(&err)?;
    let cells = rows.iter().enumerate().flat_map(|(ri, r)| {
        let y = (n_rows - 1 - ri) as f64;
        r.2.iter().enumerate().map(move |(c, v)| (c as f64, y, *v))
    });
    chart
        .draw_series(cells.clone().map(|(x, y, v)| {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))) as u8;
            Rectangle::new([(x, y), (x + 1.0, y + 1.0)], RGBColor(shade, shade, 255).filled())
        }))
        .map_err(&err)?;
    chart
        .draw_series(cells.map(|(x, y, v)| Text::new(format!("{v:.2}"), (x + 0.3, y + 0.6), ("sans-serif", 13))))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}
