//! `moei`: pretrain a GI backbone, adapt it with one method or the whole
//! ablation grid, sweep the replay-set size, inspect routers, and plot.

mod args;
mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use moei::adapters::{inject, AdapterMode, AdapterSpec};
use moei::backbone::Backbone;
use moei::bench::report::{replay_size_sweep, ForgettingReport, ReportRow};
use moei::bench::schema::write_samples;
use moei::bench::stats::router_stats;
use moei::bench::train::{pretrain, run_method, score_all, Method, RunOutcome, Scores};
use moei::bench::Benchmark;
use moei::checkpoint::{self, Checkpoint};
use moei::config::RunConfig;
use moei::export;
use moei::rng::Rng;
use moei::Error;

use manifest::Manifest;

const AFTER_HELP: &str = "\
Every config key is also a flag: `--train.lambda 2`, or by a unique suffix, `--lambda 2`.
Flags override the config file. `moei keys` prints every key with its resolved value.

Exit status: 0 ok, 1 usage error, 2 invalid input, 3 numeric failure.";

#[derive(Parser)]
#[command(name = "moei", version, about = "Mixture-of-LoRA adaptation with modulated routing on a tiny transformer")]
#[command(after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// File of `key = value` lines (dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the calibrated desk-scale profile rather than the defaults.
    #[arg(long)]
    reference: bool,
}

#[derive(Args, Clone)]
struct Source {
    /// Pretrained backbone checkpoint [default: <output_dir>/pretrained.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone on the GI families and save it.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt the pretrained backbone with one method.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// FT, LoRA, LoRA+Replay, MoEI, MoEI-ModularExpansion,
        /// MoEI-IntraModulation, MoEI-InterModulation or MoEI+Replay.
        #[arg(long, default_value = "MoEI")]
        method: String,
    },
    /// Run all eight methods for every seed and report mean and spread.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// MoEI and LoRA+Replay across replay-set sizes.
    SweepReplay {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_value = "0,50,100,200,400")]
        sizes: Vec<usize>,
    },
    /// Mean gate values per site and evaluation set of a checkpoint. A
    /// checkpoint without adapters gets freshly injected ones.
    RouteStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint (with its adapters, if any) on every family.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render the metric, sweep and router CSVs of a directory as SVG charts.
    Plot {
        /// Directory holding *.metrics.csv, sweep.csv and *.router_last_ffn.csv.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the SVGs [default: the input directory].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the benchmark splits as line-delimited task records.
    Dataset {
        #[command(flatten)]
        common: Common,
    },
    /// Print every config key with its resolved value.
    Keys {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> Option<&Common> {
        match self {
            Command::Pretrain { common }
            | Command::Train { common, .. }
            | Command::Ablate { common, .. }
            | Command::SweepReplay { common, .. }
            | Command::RouteStats { common, .. }
            | Command::Eval { common, .. }
            | Command::Dataset { common }
            | Command::Keys { common } => Some(common),
            Command::Plot { .. } => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Ablate { .. } => "ablate",
            Command::SweepReplay { .. } => "sweep-replay",
            Command::RouteStats { .. } => "route-stats",
            Command::Eval { .. } => "eval",
            Command::Plot { .. } => "plot",
            Command::Dataset { .. } => "dataset",
            Command::Keys { .. } => "keys",
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (argv, overrides) = match args::split_overrides(&argv) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Numeric(_)) { 3 } else { 2 })
        }
    }
}

fn resolve_config(common: &Common, overrides: &[(String, String)]) -> Outcome<RunConfig> {
    let mut cfg = if common.reference { RunConfig::reference() } else { RunConfig::default() };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

struct Session {
    cfg: RunConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl Session {
    fn open(command: &'static str, cfg: RunConfig) -> Outcome<Self> {
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let text = cfg.to_text();
        eprintln!("# {command} config\n{text}");
        let mut s = Session {
            manifest: Manifest::load(&dir, command)?,
            cfg,
            dir,
        };
        s.write(&format!("{command}.config.toml"), text.as_bytes())?;
        Ok(s)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Outcome {
        export::write_atomic(&self.path(name), bytes)?;
        self.manifest.record(name, bytes);
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Outcome {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn checkpoint(&mut self, name: &str, model: &Backbone, adapters: Option<&moei::adapters::AdapterSet>) -> Outcome {
        let bytes = checkpoint::to_bytes(model, adapters, &self.cfg.to_text())?;
        self.write(name, &bytes)
    }

    fn report(&mut self, stem: &str, report: &ForgettingReport) -> Outcome {
        self.write(&format!("{stem}.metrics.csv"), &export::metrics_csv(report)?)?;
        self.json(&format!("{stem}.metrics.json"), &report.rows)
    }

    fn router(&mut self, stem: &str, stats: &moei::bench::stats::RouterStats) -> Outcome {
        let all: Vec<_> = stats.rows.iter().collect();
        self.write(&format!("{stem}.router.csv"), &export::router_csv(stats.n_blocks, &all)?)?;
        self.write(&format!("{stem}.router_last_ffn.csv"), &export::router_csv(stats.n_blocks, &stats.last_ffn_rows())?)
    }

    fn finish(self) -> Outcome {
        self.manifest.save(&self.dir)?;
        eprintln!("wrote {}", self.dir.join(manifest::FILE).display());
        Ok(())
    }

    fn bench(&self) -> Outcome<Benchmark> {
        Ok(Benchmark::generate(&self.cfg.bench)?)
    }

    fn pretrained(&self, source: &Source) -> Outcome<Backbone> {
        let path = source.checkpoint.clone().unwrap_or_else(|| self.path("pretrained.ckpt"));
        if !path.exists() {
            return Err(Failure::Usage(format!(
                "no pretrained backbone at {}; run `moei pretrain` first or pass --checkpoint",
                path.display()
            )));
        }
        load_backbone(&path, &self.cfg)
    }
}

fn load_backbone(path: &Path, cfg: &RunConfig) -> Outcome<Backbone> {
    let ck = Checkpoint::load(path)?;
    if ck.header.model != cfg.model {
        eprintln!("note: using the model shape stored in {}", path.display());
    }
    Ok(ck.backbone()?)
}

fn slug(method: Method) -> String {
    method.as_str().to_lowercase().replace('+', "_plus_")
}

fn print_rows(rows: &[ReportRow]) {
    println!("{:<24} {:>5} {:<10} {:>8} {:>8} {:>8}", "method", "seed", "facet", "before", "after", "delta");
    for r in rows {
        println!(
            "{:<24} {:>5} {:<10} {:>8.3} {:>8.3} {:>+8.3}",
            r.method, r.seed, r.facet, r.before, r.after, r.delta
        );
    }
}

fn print_scores(s: &Scores) {
    for (f, v) in &s.ei {
        println!("{:<12} {v:.3}", f.as_str());
    }
    for (n, v) in &s.gi {
        println!("{n:<12} {v:.3}");
    }
    println!("{:<12} {:.3}\n{:<12} {:.3}", "ei_mean", s.ei_mean(), "gi_mean", s.gi_mean());
}

fn run(command: Command, overrides: &[(String, String)]) -> Outcome {
    let name = command.name();
    let cfg = match command.common() {
        Some(common) => resolve_config(common, overrides)?,
        None => {
            if let Some((k, _)) = overrides.first() {
                return Err(Failure::Usage(format!("`{name}` takes no config flags (got --{k})")));
            }
            RunConfig::default()
        }
    };
    match command {
        Command::Keys { .. } => {
            print!("{}", cfg.to_text());
            Ok(())
        }
        Command::Plot { input, output } => {
            let out = output.unwrap_or_else(|| input.clone());
            let written = plot::render_dir(&input, &out)?;
            if written.is_empty() {
                return Err(Failure::Usage(format!("nothing to plot in {}", input.display())));
            }
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Dataset { .. } => {
            let mut s = Session::open(name, cfg)?;
            let bench = s.bench()?;
            for fam in bench.families() {
                for (split, samples) in [("train", &fam.train), ("eval", &fam.eval)] {
                    let mut bytes = Vec::new();
                    write_samples(&mut bytes, samples).map_err(|e| Error::Parse(e.to_string()))?;
                    s.write(&format!("data/{}.{split}.jsonl", fam.name), &bytes)?;
                }
            }
            s.finish()
        }
        Command::Pretrain { .. } => {
            let mut s = Session::open(name, cfg)?;
            let bench = s.bench()?;
            let mut losses = Vec::new();
            let model = pretrain(&s.cfg.model, &bench, &s.cfg.train, |e, l| {
                eprintln!("pretrain epoch {e} loss {l:.4}");
                losses.push(l);
            })?;
            let scores = score_all(&model, None, &bench)?;
            print_scores(&scores);
            s.checkpoint("pretrained.ckpt", &model, None)?;
            s.json("pretrain.json", &serde_json::json!({ "epoch_loss": losses, "scores": scores }))?;
            s.finish()
        }
        Command::Train { source, method, .. } => {
            let method = Method::from_str(&method)?;
            let mut s = Session::open(name, cfg)?;
            let bench = s.bench()?;
            let pre = s.pretrained(&source)?;
            let before = score_all(&pre, None, &bench)?;
            let out = run_method(method, &pre, &bench, &s.cfg.adapters, &s.cfg.train, &before)?;
            let stem = format!("{}-seed{}", slug(method), s.cfg.train.seed);
            let mut report = ForgettingReport::default();
            report.add(&out);
            print_rows(&report.rows);
            write_outcome(&mut s, &stem, &out, &report)?;
            s.checkpoint(&format!("{stem}.ckpt"), &out.model, out.adapters.as_ref())?;
            s.finish()
        }
        Command::Ablate { source, seeds, .. } => {
            if seeds.is_empty() {
                return Err(Failure::Usage("--seeds needs at least one seed".into()));
            }
            let mut s = Session::open(name, cfg)?;
            let bench = s.bench()?;
            let pre = s.pretrained(&source)?;
            let before = score_all(&pre, None, &bench)?;
            let mut report = ForgettingReport::default();
            for &seed in &seeds {
                for method in Method::ALL {
                    let mut train = s.cfg.train.clone();
                    train.seed = seed;
                    let out = run_method(method, &pre, &bench, &s.cfg.adapters, &train, &before)?;
                    eprintln!(
                        "{:<24} seed {seed}: ei_mean {:.3} gi_mean {:.3} ({:+.3})",
                        method.as_str(),
                        out.after.ei_mean(),
                        out.after.gi_mean(),
                        out.after.gi_mean() - before.gi_mean()
                    );
                    if let Some(stats) = &out.router {
                        s.router(&format!("ablate-{}-seed{seed}", slug(method)), stats)?;
                    }
                    report.add(&out);
                }
            }
            let report = report.with_aggregates();
            let summary: Vec<ReportRow> =
                report.rows.iter().filter(|r| r.seed == "mean" && (r.facet == "ei_mean" || r.facet == "gi_mean")).cloned().collect();
            print_rows(&summary);
            s.report("ablate", &report)?;
            s.finish()
        }
        Command::SweepReplay { source, sizes, .. } => {
            let mut s = Session::open(name, cfg)?;
            let bench = s.bench()?;
            let pre = s.pretrained(&source)?;
            let before = score_all(&pre, None, &bench)?;
            let rows = replay_size_sweep(&sizes, &pre, &bench, &s.cfg.adapters, &s.cfg.train, &before, |r| {
                eprintln!("{:<12} size {:>5}: gi {:.3} ({:+.3}) ei {:.3}", r.method, r.replay_size, r.gi_after, r.delta_gi, r.ei_after)
            })?;
            s.write("sweep.csv", &export::sweep_csv(&rows)?)?;
            s.json("sweep.json", &rows)?;
            s.finish()
        }
        Command::RouteStats { checkpoint, .. } => {
            let mut s = Session::open(name, cfg)?;
            let bench = s.bench()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.backbone()?;
            let set = match ck.adapters_for(&model)? {
                Some(set) => set,
                None => {
                    let spec = if s.cfg.adapters.mode == AdapterMode::None { AdapterSpec::default() } else { s.cfg.adapters.clone() };
                    inject(&model, &spec, &mut Rng::new(s.cfg.train.seed))?
                }
            };
            let stats = router_stats(&model, &set, &bench)?;
            print!("{}", stats.summary_table());
            s.router(&stem_of(&checkpoint), &stats)?;
            s.finish()
        }
        Command::Eval { checkpoint, .. } => {
            let mut s = Session::open(name, cfg)?;
            let bench = s.bench()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.backbone()?;
            let set = ck.adapters_for(&model)?;
            let scores = score_all(&model, set.as_ref(), &bench)?;
            print_scores(&scores);
            s.json(&format!("{}.eval.json", stem_of(&checkpoint)), &scores)?;
            s.finish()
        }
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

fn write_outcome(s: &mut Session, stem: &str, out: &RunOutcome, report: &ForgettingReport) -> Outcome {
    s.report(stem, report)?;
    if let Some(stats) = &out.router {
        print!("{}", stats.summary_table());
        s.router(stem, stats)?;
    }
    s.json(
        &format!("{stem}.run.json"),
        &serde_json::json!({
            "method": out.method.as_str(),
            "seed": out.seed,
            "steps": out.steps,
            "modulation_steps": out.modulation_steps,
            "epoch_loss": out.epoch_loss,
        }),
    )
}
