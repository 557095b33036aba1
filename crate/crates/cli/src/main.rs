//! `slimrank`: train the toy fixture, calibrate, compress, evaluate, and run the
//! experiment and verification suites.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slimrank_core::bench::{
    ablate_neurons, calib_robustness, compare_uniform_adaptive, energy_fractions, flop_count, gamma_sweep, ratio_sweep,
    relative_spread, time_bench, AblationMode, AblationSpec, BenchShape, Report,
};
use slimrank_core::decomposer::SelectionRule;
use slimrank_core::io::{
    load_compressed, load_model, load_stats, model_hash, save_compressed, save_model, save_stats, PipelineConfig,
    TensorFile, COMPRESSED_KIND, DENSE_KIND,
};
use slimrank_core::model::ModelWeights;
use slimrank_core::pipeline::{calibrate, compress, eval_tokens, evaluate, train_fixture};
use slimrank_core::verify;
use slimrank_core::SlimError;

#[derive(Parser)]
#[command(name = "slimrank", version, about = "Low-rank compression of a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Calibration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the model to remove.
    #[arg(long)]
    ratio: Option<f64>,
    /// Prime-neuron fraction, or energy threshold with `--rule energy-threshold`.
    #[arg(long)]
    gamma: Option<f64>,
    /// `fixed-fraction` or `energy-threshold`.
    #[arg(long)]
    rule: Option<SelectionRule>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, SlimError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.calibration.seed = s;
        }
        if let Some(r) = self.ratio {
            cfg.target_ratio = r;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(r) = self.rule {
            cfg.rule = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model described by the config and save it.
    TrainFixture {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect calibration statistics of a dense model.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a dense model; calibrates first unless `--stats` is given.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the manifest as text.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Perplexity of a dense or compressed model on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Perplexity after zeroing the top prime or bottom marginal neurons.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Fractions of top neurons to remove.
        #[arg(long, value_delimiter = ',', default_value = "0.01")]
        top: Vec<f64>,
        /// Fractions of bottom neurons to remove.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        bottom: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ratio, γ, energy, uniform-versus-adaptive or calibration sweeps.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// `ratio`, `gamma`, `energy`, `uniform` or `calibration`.
        #[arg(long, default_value = "ratio")]
        kind: String,
        /// Comma-separated sweep values; a per-kind default otherwise.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Render a text bar chart of this column to stderr.
        #[arg(long)]
        bars: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP counts and median matmul times, dense versus factored.
    Bench {
        #[arg(long, default_value_t = 11)]
        repeats: usize,
        #[arg(long = "seq-len", default_value_t = 256)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in mathematical checks; exits 3 on any violation.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<SlimError> for Failure {
    fn from(e: SlimError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("usage error")
                .trim_start_matches("error: ");
            eprintln!("ERROR 1: {first}");
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numerical(m) => (3, m),
            };
            eprintln!("ERROR {code}: {msg}");
            ExitCode::from(code)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn stats_for(
    weights: &ModelWeights,
    cfg: &PipelineConfig,
    path: Option<&Path>,
) -> CliResult<slimrank_core::calibration::CalibStats> {
    Ok(match path {
        Some(p) => load_stats(p, Some(model_hash(weights)))?,
        None => calibrate(weights, cfg)?,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn run(command: Command) -> CliResult {
    match command {
        Command::TrainFixture { common, out } => {
            let cfg = common.config()?;
            let steps = cfg.train.steps;
            let (w, report) = train_fixture(&cfg, |i, loss| {
                if i % 100 == 0 || i + 1 == steps {
                    eprintln!("step {i} loss {loss:.4}");
                }
            })?;
            save_model(&w, &out)?;
            let eval = eval_tokens(&cfg)?;
            println!("final_loss\t{}", fmt(report.losses.last().copied().unwrap_or(f64::NAN)));
            println!("perplexity\t{}", fmt(evaluate(&w, &eval, &cfg)?));
            println!("model_hash\t{:016x}", model_hash(&w));
        }
        Command::Calibrate { common, input, out } => {
            let cfg = common.config()?;
            let w = load_model(&input)?;
            let stats = calibrate(&w, &cfg)?;
            save_stats(&stats, &out)?;
            println!("tokens\t{}", stats.token_count);
            println!("model_hash\t{:016x}", stats.model_hash);
        }
        Command::Compress {
            common,
            input,
            stats,
            out,
            manifest,
        } => {
            let cfg = common.config()?;
            let w = load_model(&input)?;
            let stats = stats_for(&w, &cfg, stats.as_deref())?;
            let result = compress(&w, &stats, &cfg)?;
            save_compressed(&result.model, &result.manifest, &out)?;
            if let Some(p) = manifest {
                emit(&result.manifest.to_text(), Some(&p))?;
            }
            println!("achieved_ratio\t{}", fmt(result.manifest.achieved_ratio));
            println!("objective\t{}", fmt(result.manifest.objective));
            println!("budget\t{}", result.manifest.budget);
        }
        Command::Eval { common, input } => {
            let cfg = common.config()?;
            let eval = eval_tokens(&cfg)?;
            let tf = TensorFile::load(&input)?;
            match tf.kind.as_str() {
                DENSE_KIND => {
                    let w = slimrank_core::io::dense_from_tensor_file(&tf)?;
                    println!("perplexity\t{}", fmt(evaluate(&w, &eval, &cfg)?));
                }
                COMPRESSED_KIND => {
                    drop(tf);
                    let (m, manifest) = load_compressed(&input)?;
                    println!("perplexity\t{}", fmt(evaluate(&m, &eval, &cfg)?));
                    println!("achieved_ratio\t{}", fmt(manifest.achieved_ratio));
                }
                other => return Err(Failure::Data(format!("cannot evaluate a {other} file"))),
            }
        }
        Command::Ablate {
            common,
            input,
            stats,
            top,
            bottom,
            out,
        } => {
            let cfg = common.config()?;
            let w = load_model(&input)?;
            let stats = stats_for(&w, &cfg, stats.as_deref())?;
            let eval = eval_tokens(&cfg)?;
            let mut report = Report::new("ablation", cfg.hash(), &["mode", "fraction", "perplexity"]);
            report.push(vec!["dense".into(), fmt(0.0), fmt(evaluate(&w, &eval, &cfg)?)]);
            let modes = top.iter().map(|&f| ("top-pn", AblationMode::RemoveTopPN(f), f)).chain(
                bottom
                    .iter()
                    .map(|&f| ("bottom-mn", AblationMode::RemoveBottomMN(f), f)),
            );
            for (name, mode, f) in modes {
                let spec = AblationSpec::non_excluded(mode, &cfg, w.config.n_layers);
                let ablated = ablate_neurons(&w, &stats, &spec)?;
                report.push(vec![name.into(), fmt(f), fmt(evaluate(&ablated, &eval, &cfg)?)]);
            }
            emit(&report.to_tsv(), out.as_deref())?;
        }
        Command::Sweep {
            common,
            input,
            stats,
            kind,
            values,
            bars,
            out,
        } => {
            let cfg = common.config()?;
            let w = load_model(&input)?;
            let eval = eval_tokens(&cfg)?;
            let report = match kind.as_str() {
                "ratio" => {
                    let stats = stats_for(&w, &cfg, stats.as_deref())?;
                    let ratios = if values.is_empty() {
                        vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
                    } else {
                        values
                    };
                    let mut r = Report::new(
                        "ratio-sweep",
                        cfg.hash(),
                        &["ratio", "perplexity", "achieved_ratio", "objective", "error"],
                    );
                    for (ratio, row) in ratio_sweep(&w, &stats, &cfg, &ratios, &eval)? {
                        r.push(sweep_row(ratio, row));
                    }
                    r
                }
                "gamma" => {
                    let stats = stats_for(&w, &cfg, stats.as_deref())?;
                    let gammas = if values.is_empty() {
                        vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.3]
                    } else {
                        values
                    };
                    let mut r = Report::new(
                        "gamma-sweep",
                        cfg.hash(),
                        &["gamma", "perplexity", "achieved_ratio", "objective", "error"],
                    );
                    for (g, row) in gamma_sweep(&w, &stats, &cfg, &gammas, &eval) {
                        r.push(sweep_row(g, row));
                    }
                    r
                }
                "energy" => {
                    let stats = stats_for(&w, &cfg, stats.as_deref())?;
                    let thresholds = if values.is_empty() {
                        vec![0.5, 0.8, 0.9, 0.95, 0.99]
                    } else {
                        values
                    };
                    let names: Vec<String> = thresholds.iter().map(|t| format!("frac@{t}")).collect();
                    let mut cols = vec!["layer"];
                    cols.extend(names.iter().map(String::as_str));
                    let mut r = Report::new("energy-profile", cfg.hash(), &cols);
                    for (l, fr) in energy_fractions(&stats, &thresholds)?.into_iter().enumerate() {
                        let mut row = vec![l.to_string()];
                        row.extend(fr.into_iter().map(fmt));
                        r.push(row);
                    }
                    r
                }
                "uniform" => {
                    let stats = stats_for(&w, &cfg, stats.as_deref())?;
                    let ratios = if values.is_empty() {
                        vec![cfg.target_ratio]
                    } else {
                        values
                    };
                    let mut r = Report::new(
                        "uniform-vs-adaptive",
                        cfg.hash(),
                        &[
                            "ratio",
                            "objective_uniform",
                            "objective_adaptive",
                            "ppl_uniform",
                            "ppl_adaptive",
                        ],
                    );
                    for ratio in ratios {
                        let c = compare_uniform_adaptive(&w, &stats, &cfg, ratio, &eval)?;
                        r.push(vec![
                            fmt(ratio),
                            fmt(c.objective_uniform),
                            fmt(c.objective_adaptive),
                            fmt(c.ppl_uniform),
                            fmt(c.ppl_adaptive),
                        ]);
                    }
                    r
                }
                "calibration" => {
                    let counts: Vec<usize> = if values.is_empty() {
                        vec![8, 16, 32]
                    } else {
                        values.iter().map(|v| *v as usize).collect()
                    };
                    let cells = calib_robustness(&w, &cfg, &counts, &["all", "first-half", "second-half"], &eval)?;
                    let mut r = Report::new("calibration-robustness", cfg.hash(), &["count", "split", "perplexity"]);
                    for c in &cells {
                        r.push(vec![c.count.to_string(), c.split.clone(), fmt(c.perplexity)]);
                    }
                    let ppl: Vec<f64> = cells.iter().map(|c| c.perplexity).collect();
                    eprintln!("relative spread {:.4}", relative_spread(&ppl));
                    r
                }
                other => {
                    return Err(Failure::Usage(format!(
                        "unknown sweep kind {other:?}; expected ratio, gamma, energy, uniform or calibration"
                    )))
                }
            };
            if let Some(col) = bars {
                eprint!("{}", report.bars(&col, 40));
            }
            emit(&report.to_tsv(), out.as_deref())?;
        }
        Command::Bench {
            repeats,
            seq_len,
            seed,
            out,
        } => {
            let shapes = bench_shapes(repeats, seq_len);
            let timings = time_bench(&shapes, seed)?;
            let mut r = Report::new(
                "matmul-bench",
                seed,
                &[
                    "label",
                    "m",
                    "n",
                    "k",
                    "dense_flops",
                    "factored_flops",
                    "flop_ratio",
                    "dense_s",
                    "factored_s",
                    "speedup",
                ],
            );
            for (s, t) in shapes.iter().zip(&timings) {
                let f = flop_count(s);
                r.push(vec![
                    s.label.clone(),
                    s.m.to_string(),
                    s.n.to_string(),
                    s.k.map_or("dense".into(), |k| k.to_string()),
                    f.dense.to_string(),
                    f.factored.to_string(),
                    fmt(f.ratio()),
                    format!("{:.6e}", t.dense_median),
                    t.factored_median.map_or("-".into(), |v| format!("{v:.6e}")),
                    t.speedup().map_or("-".into(), fmt),
                ]);
            }
            emit(&r.to_tsv(), out.as_deref())?;
        }
        Command::Verify { seed } => {
            let results = verify::run_all(seed)?;
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Err(Failure::Numerical("verification failed".into()));
            }
        }
    }
    Ok(())
}

fn sweep_row(x: f64, row: Result<slimrank_core::bench::SweepPoint, SlimError>) -> Vec<String> {
    match row {
        Ok(p) => vec![
            fmt(x),
            fmt(p.perplexity),
            fmt(p.achieved_ratio),
            fmt(p.objective),
            "-".into(),
        ],
        Err(e) => vec![
            fmt(x),
            "-".into(),
            "-".into(),
            "-".into(),
            e.to_string().replace('\t', " "),
        ],
    }
}

/// Desk-sized analogues of the feed-forward projections, each factored at
/// the rank that keeps 70% of its parameters and at a quarter of that.
fn bench_shapes(repeats: usize, seq_len: usize) -> Vec<BenchShape> {
    let mut out = Vec::new();
    for (label, m, n) in [
        ("up-512x1376", 512, 1376),
        ("down-1376x512", 1376, 512),
        ("square-768", 768, 768),
    ] {
        let k70 = slimrank_core::bench::rank_for_ratio(m, n, 0.3, 16);
        for (tag, k) in [("k70", Some(k70)), ("k25", Some(k70 / 4))] {
            out.push(BenchShape {
                label: format!("{label}-{tag}"),
                m,
                n,
                k,
                repeats,
                seq_len,
            });
        }
    }
    out
}
