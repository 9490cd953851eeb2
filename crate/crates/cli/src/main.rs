mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alphaloop::dsl::parse;
use alphaloop::kernels::bench::{bench_kernels, DEFAULT_WINDOW};
use alphaloop::kernels::{evaluate, Backend};
use alphaloop::library::{AdmissionThresholds, FactorLibrary};
use alphaloop::memory::{seed_memory, ExperienceMemory};
use alphaloop::metrics::{cost_stress, ic_series, quantile_analysis, TearSheet, TEAR_SHEET_HEADER};
use alphaloop::miner::{ablation_run, ralph_loop, MiningResult};
use alphaloop::panel::{forward_return, load_csv, synth_panel, Panel, SynthConfig};
use alphaloop::portfolio::{
    combine_equal, combine_ic_weighted, combine_orthogonal, export_design, select_lasso,
    select_stepwise, stepwise_csv, CombinedSignal,
};
use alphaloop::SignalMatrix;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "alphaloop", version, about = "Formulaic alpha mining engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic panel CSV.
    Synth {
        #[arg(long, default_value_t = 50)]
        assets: usize,
        #[arg(long, default_value_t = 2000)]
        bars: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Planted next-bar predictability in [0, 1).
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate one formula and write its tear sheet.
    Eval {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        formula: String,
        #[arg(long, default_value_t = 5)]
        quantiles: usize,
        #[arg(long, default_value = "optimized")]
        backend: Backend,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the mining loop from a run manifest.
    Mine {
        #[arg(long)]
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "ALPHALOOP_WORKERS")]
        workers: Option<usize>,
        #[arg(long)]
        max_batches: Option<usize>,
        #[arg(long)]
        target_size: Option<usize>,
    },
    /// Mine with and without memory and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "ALPHALOOP_WORKERS")]
        workers: Option<usize>,
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// Combine a library's factors three ways and report out-of-sample.
    Combine {
        #[command(flatten)]
        lib: LibraryArgs,
        #[arg(long, default_value_t = 5)]
        quantiles: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Select a factor subset by lasso or greedy stepwise ICIR.
    Select {
        #[command(flatten)]
        lib: LibraryArgs,
        #[arg(long, value_enum)]
        method: SelectMethod,
        /// Comma-separated lambda grid for the lasso.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.02,0.01,0.005,0.002,0.001,0")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        max_steps: usize,
        /// Also write the stacked design matrix for external learners.
        #[arg(long)]
        export_design: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Net long-short cumulative returns across transaction costs.
    Stress {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        formula: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,4,7,10,11")]
        costs: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        quantiles: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Time naive against optimized kernels.
    Bench {
        /// Panel CSV; a synthetic panel is generated when absent.
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        assets: usize,
        #[arg(long, default_value_t = 12_610)]
        bars: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Whole formulas to time in addition to single operators.
        #[arg(long)]
        formula: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct LibraryArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    library: PathBuf,
    /// Use only the first N assets (match the universe the library was mined on).
    #[arg(long)]
    assets: Option<usize>,
    /// Correlation budget re-verified on load.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// First out-of-sample bar; defaults to the midpoint.
    #[arg(long)]
    split: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectMethod {
    Lasso,
    Stepwise,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            report_error("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error("runtime", &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let line = json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            assets,
            bars,
            seed,
            alpha,
            output,
        } => {
            let panel = synth_panel(&SynthConfig::new(assets, bars, seed).with_alpha(alpha))?;
            panel.write_csv(&output)?;
            summary(json!({ "wrote": output, "assets": assets, "bars": bars }));
        }
        Command::Eval {
            panel,
            formula,
            quantiles,
            backend,
            output,
        } => {
            let panel = load_csv(&panel)?;
            let signal = eval_formula(&formula, &panel, backend)?;
            let target = forward_return(&panel)?;
            ensure_dir(&output)?;
            let sheet = TearSheet::compute(&signal, &target, quantiles)?;
            write(&output.join("tear_sheet.csv"), &format!("formula,{TEAR_SHEET_HEADER}\n{},{}\n", quote(&formula), sheet.csv_row()))?;
            let ic = ic_series(&signal, &target)?;
            let mut s = String::from("time,ic\n");
            for (t, v) in ic.timestamps.iter().zip(&ic.values) {
                s.push_str(&format!("{t},{}\n", cell(*v)));
            }
            write(&output.join("ic_series.csv"), &s)?;
            let q = quantile_analysis(&signal, &target, quantiles)?;
            let mut s = String::from("quantile,mean_return\n");
            for (i, v) in q.quantile_returns.iter().enumerate() {
                s.push_str(&format!("{},{}\n", i + 1, cell(*v)));
            }
            write(&output.join("quantile_returns.csv"), &s)?;
            let mut s = String::from("time,long_short,cumulative\n");
            for ((t, ls), cum) in target.axes().timestamps.iter().zip(&q.ls_series).zip(&q.ls_cumulative) {
                s.push_str(&format!("{t},{},{}\n", cell(*ls), cell(*cum)));
            }
            write(&output.join("long_short.csv"), &s)?;
            summary(serde_json::to_value(&sheet)?);
        }
        Command::Mine {
            config,
            output,
            seed,
            workers,
            max_batches,
            target_size,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            override_mining(&mut cfg, seed, workers, max_batches);
            if let Some(k) = target_size {
                cfg.mining.target_size = k;
            }
            let out = output_dir(&cfg, output)?;
            let panel = cfg.panel()?;
            let memory = initial_memory(&cfg)?;
            let res = ralph_loop(&panel, &cfg.mining, memory)?;
            write_run(&out, &res)?;
            summary(json!({
                "library_size": res.library.len(),
                "batches": res.log.batches().count(),
                "candidates": res.log.records().count(),
                "output": out,
            }));
        }
        Command::Ablate {
            config,
            output,
            seed,
            workers,
            max_batches,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            override_mining(&mut cfg, seed, workers, max_batches);
            let out = output_dir(&cfg, output)?;
            let panel = cfg.panel()?;
            let memory = initial_memory(&cfg)?;
            let (report, [with, without]) = ablation_run(&panel, &cfg.mining, &memory)?;
            write(&out.join("ablation.csv"), &report.to_csv())?;
            write_run(&out.join("with_memory"), &with)?;
            write_run(&out.join("no_memory"), &without)?;
            summary(serde_json::to_value(&report)?);
        }
        Command::Combine {
            lib,
            quantiles,
            output,
        } => {
            let (panel, library, split) = load_library(&lib)?;
            let target = forward_return(&panel)?;
            let signals: Vec<SignalMatrix> = library.entries().iter().map(|e| e.signal.signal().clone()).collect();
            let train_target = target.slice_times(0, split);
            let train_ics: Vec<f64> = signals
                .iter()
                .map(|s| ic_series(&s.slice_times(0, split), &train_target).map(|c| c.mean().unwrap_or(0.0)))
                .collect::<Result<_, _>>()?;
            let combos: Vec<CombinedSignal> = vec![
                combine_equal(&signals, &train_ics)?,
                combine_ic_weighted(&signals, &train_ics)?,
                combine_orthogonal(&signals, &train_ics)?,
            ];
            let n = panel.n_times();
            let test_target = target.slice_times(split, n);
            let mut s = format!("method,{TEAR_SHEET_HEADER}\n");
            let mut out = Vec::new();
            for c in &combos {
                // A method whose signal never spans enough assets on the test
                // bars still gets a row, with every statistic empty.
                match TearSheet::compute(&c.signal.slice_times(split, n), &test_target, quantiles) {
                    Ok(sheet) => {
                        s.push_str(&format!("{},{}\n", c.method, sheet.csv_row()));
                        out.push(json!({ "method": c.method, "ic_mean": sheet.ic_mean, "icir": sheet.icir }));
                    }
                    Err(e) => {
                        log::warn!("{}: {e}", c.method);
                        let blanks = ",".repeat(TEAR_SHEET_HEADER.split(',').count());
                        s.push_str(&format!("{}{blanks}\n", c.method));
                        out.push(json!({ "method": c.method, "error": e.to_string() }));
                    }
                }
            }
            ensure_dir(&output)?;
            write(&output.join("combination.csv"), &s)?;
            let mut w = String::from("factor_id,train_ic,equal_weight,ic_weight,sign\n");
            for (i, e) in library.entries().iter().enumerate() {
                w.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.id, train_ics[i], combos[0].weights[i], combos[1].weights[i], combos[0].signs[i]
                ));
            }
            write(&output.join("weights.csv"), &w)?;
            summary(json!(out));
        }
        Command::Select {
            lib,
            method,
            lambdas,
            max_steps,
            export_design: design_path,
            output,
        } => {
            let (panel, library, split) = load_library(&lib)?;
            let target = forward_return(&panel)?;
            let signals: Vec<SignalMatrix> = library.entries().iter().map(|e| e.signal.signal().clone()).collect();
            let ids: Vec<u64> = library.entries().iter().map(|e| e.id).collect();
            if let Some(p) = design_path {
                let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                export_design(std::io::BufWriter::new(f), &signals, &ids, &target)?;
            }
            match method {
                SelectMethod::Lasso => {
                    let sel = select_lasso(&signals, &target, &lambdas, split)?;
                    write(&output, &sel.to_csv(&ids))?;
                    let chosen: Vec<u64> = sel.selected.iter().map(|&j| ids[j]).collect();
                    summary(json!({ "lambda": sel.lambda, "selected": chosen }));
                }
                SelectMethod::Stepwise => {
                    let n = panel.n_times();
                    let sigs: Vec<SignalMatrix> = signals.iter().map(|s| s.slice_times(0, split)).collect();
                    let (order, rows) = select_stepwise(&sigs, &target.slice_times(0, n.min(split)), max_steps)?;
                    write(&output, &stepwise_csv(&rows, &ids))?;
                    let chosen: Vec<u64> = order.iter().map(|&j| ids[j]).collect();
                    summary(json!({ "selected": chosen }));
                }
            }
        }
        Command::Stress {
            panel,
            formula,
            costs,
            quantiles,
            output,
        } => {
            let panel = load_csv(&panel)?;
            let signal = eval_formula(&formula, &panel, Backend::Optimized)?;
            let target = forward_return(&panel)?;
            let series = cost_stress(&signal, &target, quantiles, &costs)?;
            let mut s = String::from("time");
            for c in &series {
                s.push_str(&format!(",net_{}bps", c.cost_bps));
            }
            s.push('\n');
            for (t, ts) in target.axes().timestamps.iter().enumerate() {
                s.push_str(&ts.to_string());
                for c in &series {
                    s.push_str(&format!(",{}", c.cumulative[t]));
                }
                s.push('\n');
            }
            write(&output, &s)?;
            let finals: Vec<_> = series
                .iter()
                .map(|c| json!({ "cost_bps": c.cost_bps, "final": c.cumulative.last() }))
                .collect();
            summary(json!(finals));
        }
        Command::Bench {
            panel,
            assets,
            bars,
            repeats,
            window,
            formula,
            output,
        } => {
            let panel = match panel {
                Some(p) => load_csv(&p)?,
                None => synth_panel(&SynthConfig::new(assets, bars, 0))?,
            };
            let exprs = formula
                .iter()
                .map(|f| parse(f).map_err(|e| anyhow!("formula `{f}`: {e}")))
                .collect::<Result<Vec<_>>>()?;
            let report = bench_kernels(&panel, &exprs, repeats, window);
            match output {
                Some(p) => {
                    let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    report.write_csv(f)?;
                    summary(json!({ "rows": report.rows.len(), "wrote": p }));
                }
                None => print!("{}", report.to_csv_string()),
            }
        }
    }
    Ok(())
}

fn summary(v: serde_json::Value) {
    println!("{v}");
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating directory {}", p.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(contents.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn eval_formula(formula: &str, panel: &Panel, backend: Backend) -> Result<SignalMatrix> {
    let expr = parse(formula).map_err(|e| anyhow!("formula `{formula}`: {e}"))?;
    Ok(evaluate(&expr, panel, backend)?)
}

fn override_mining(cfg: &mut RunConfig, seed: Option<u64>, workers: Option<usize>, max_batches: Option<usize>) {
    if let Some(s) = seed {
        cfg.mining.seed = s;
    }
    if let Some(w) = workers {
        cfg.mining.workers = w;
    }
    if let Some(b) = max_batches {
        cfg.mining.max_batches = b;
    }
}

fn output_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --output or set output_dir in the config"))?;
    ensure_dir(&dir)?;
    Ok(dir)
}

fn initial_memory(cfg: &RunConfig) -> Result<ExperienceMemory> {
    Ok(match cfg.memory.as_str() {
        "builtin" => seed_memory(&cfg.mining.memory),
        "empty" => ExperienceMemory::new(),
        path => ExperienceMemory::load(Path::new(path))?,
    })
}

fn write_run(dir: &Path, res: &MiningResult) -> Result<()> {
    ensure_dir(dir)?;
    res.library.save(&dir.join("library.tsv"))?;
    res.memory.save(&dir.join("memory.json"))?;
    write(&dir.join("run_log.jsonl"), &res.log.to_jsonl())
}

fn load_library(args: &LibraryArgs) -> Result<(Panel, FactorLibrary, usize)> {
    let mut panel = load_csv(&args.panel)?;
    if let Some(n) = args.assets {
        panel = panel.subset_assets(n);
    }
    let th = AdmissionThresholds {
        theta: args.theta,
        ..AdmissionThresholds::default()
    };
    th.validate().map_err(|e| anyhow!(e))?;
    let library = FactorLibrary::load(&args.library, &panel, th, Backend::Optimized)?;
    if library.is_empty() {
        bail!("library {} is empty", args.library.display());
    }
    let split = args.split.unwrap_or(panel.n_times() / 2);
    if split == 0 || split >= panel.n_times() {
        bail!("split {split} must lie strictly inside the panel's {} bars", panel.n_times());
    }
    Ok((panel, library, split))
}
