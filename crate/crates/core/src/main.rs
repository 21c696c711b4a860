use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tmrd::ablation::{run_ablation, threads_from_env, AblationSpec};
use tmrd::checks::{gradcheck, GradTarget};
use tmrd::detector::Detector;
use tmrd::metrics::{evaluate_model, IOU_GRID};
use tmrd::scenes::{generate, read_dataset, write_dataset, Dataset, SceneConfig};
use tmrd::trainer::{burn_in, checkpoint_load, checkpoint_save, metrics_csv, TrainConfig, Trainer};
use tmrd::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// Teacher-student semi-supervised detection on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "tmrd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.seed=3`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled/unlabeled/test dataset file
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        count: usize,
        /// Labeled fraction in (0, 1)
        #[arg(long, default_value_t = 0.1)]
        ratio: f64,
        /// Scenes in the test split
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised burn-in only; writes a checkpoint that `train --resume` continues
    Burnin {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full training run: metrics.csv and checkpoint.tmrc in the output directory
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint (its config is used)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop before this iteration and checkpoint there
        #[arg(long)]
        stop_at: Option<usize>,
        /// Print the effective config and exit
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint's teacher (or student) on the test split
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        student: bool,
    },
    /// Run an ablation matrix and print the checkmark table
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Row file: one label (A1 ... A42) or `label mode cascade uncertainty` per line
        #[arg(long, conflicts_with = "rows")]
        spec: Option<PathBuf>,
        /// Comma-separated standard labels
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write ablation.csv and ablation.txt here
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare tape gradients against central differences
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// sup, tmr, student or all
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
    Exit(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    let mut bad = Vec::new();
    for kv in &args.set {
        match kv.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = cfg.set(k.trim(), v.trim()) {
                    bad.push(format!("--set {e}"));
                }
            }
            None => bad.push(format!("--set {kv}: expected KEY=VALUE")),
        }
    }
    if let Err(Error::Config(more)) = cfg.validate() {
        bad.extend(more);
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad).into());
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Run(Error::Io(e)))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_gen_data(seed: u64, count: usize, ratio: f64, test_count: Option<usize>, out: &Path) -> CliResult {
    let mut sc = SceneConfig::default();
    if let Some(t) = test_count {
        sc.test_count = t;
    }
    let ds = generate(&sc, seed, count, ratio)?;
    write_dataset(&ds, out)?;
    println!(
        "wrote {}: {} labeled, {} unlabeled, {} test",
        out.display(),
        ds.labeled.len(),
        ds.unlabeled.len(),
        ds.test.len()
    );
    Ok(())
}

fn cmd_burnin(data: &Dataset, cfg: TrainConfig, out: &Path) -> CliResult {
    let trainer = Trainer::new(cfg.clone(), data)?;
    let params = burn_in(&cfg, data)?;
    let state = trainer.state_after_burn_in(&params)?;
    let (ap50, map, _) = trainer.evaluate_state(&state)?;
    checkpoint_save(&cfg, &state, out)?;
    println!("burn-in {} iterations: AP50 {ap50:.4} mAP {map:.4}", cfg.burn_in_iterations);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(
    data: &Dataset,
    cfg: TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_at: Option<usize>,
) -> CliResult {
    let (cfg, state) = match resume {
        Some(path) => {
            let (cfg, state) = checkpoint_load(path)?;
            (cfg, Some(state))
        }
        None => (cfg, None),
    };
    let trainer = Trainer::new(cfg.clone(), data)?;
    let mut state = match state {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    create_dir(out_dir)?;
    let stop = stop_at.unwrap_or(cfg.total_iterations);
    let result = trainer.run_until(&mut state, stop);
    // the log up to the failure is still useful
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&state.history))?;
    result?;
    checkpoint_save(&cfg, &state, &out_dir.join("checkpoint.tmrc"))?;
    match state.history.iter().rev().find(|r| r.map.is_some()) {
        Some(r) => println!(
            "iteration {}: AP50 {:.4} mAP {:.4}",
            r.iteration,
            r.ap50.unwrap_or(f64::NAN),
            r.map.unwrap_or(f64::NAN)
        ),
        None => println!("stopped at iteration {}", state.iteration),
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_eval(data: &Dataset, checkpoint: &Path, student: bool) -> CliResult {
    let (cfg, state) = checkpoint_load(checkpoint)?;
    let trainer = Trainer::new(cfg.clone(), data)?;
    let params = if student { &state.student } else { &state.teacher };
    let model = Detector { cfg: trainer.detector(), params };
    let r = evaluate_model(&model, &data.test, data.num_classes, &cfg.eval)?;
    println!("{:<6} {:>8} {:>8}", "class", "AP50", "AP50:95");
    for (c, row) in r.ap.iter().enumerate() {
        println!("{c:<6} {:>8.4} {:>8.4}", row[0], row.iter().sum::<f64>() / IOU_GRID.len() as f64);
    }
    println!("{:<6} {:>8.4} {:>8.4}", "all", r.ap50, r.map);
    Ok(())
}

fn cmd_ablate(data: &Dataset, cfg: TrainConfig, spec: AblationSpec, out_dir: Option<&Path>) -> CliResult {
    let report = run_ablation(&cfg, data, &spec, threads_from_env())?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_file(&dir.join("ablation.csv"), &report.to_csv())?;
        write_file(&dir.join("ablation.txt"), &table)?;
    }
    if report.all_ok() {
        Ok(())
    } else {
        eprintln!("error: at least one ablation run failed");
        Err(Failure::Exit(EXIT_DIVERGED))
    }
}

fn cmd_gradcheck(h: f64, target: &str, seed: u64) -> CliResult {
    let targets = match target {
        "all" => GradTarget::ALL.to_vec(),
        t => vec![t.parse::<GradTarget>().map_err(|e| Failure::Usage(e.to_string()))?],
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(Failure::Usage(format!("--h must be positive, got {h}")));
    }
    let mut ok = true;
    for t in targets {
        let r = gradcheck(t, h, seed)?;
        println!("{}", r.line());
        ok &= r.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Exit(EXIT_GRADCHECK))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { seed, count, ratio, test_count, out } => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Failure::Usage(format!("--ratio must lie in (0, 1), got {ratio}")));
            }
            cmd_gen_data(seed, count, ratio, test_count, &out)
        }
        Command::Burnin { data, cfg, out } => {
            let cfg = load_config(&cfg)?;
            cmd_burnin(&read_dataset(&data)?, cfg, &out)
        }
        Command::Train { data, cfg, out_dir, resume, stop_at, print_config } => {
            if resume.is_some() && (cfg.config.is_some() || !cfg.set.is_empty()) {
                return Err(Failure::Usage("--resume uses the checkpoint's config; drop --config/--set".into()));
            }
            let cfg = load_config(&cfg)?;
            if print_config {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            cmd_train(&read_dataset(&data)?, cfg, &out_dir, resume.as_deref(), stop_at)
        }
        Command::Eval { data, checkpoint, student } => cmd_eval(&read_dataset(&data)?, &checkpoint, student),
        Command::Ablate { data, spec, rows, cfg, out_dir } => {
            let spec = match (spec, rows.is_empty()) {
                (Some(path), _) => {
                    let text =
                        fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                    AblationSpec::parse(&text)?
                }
                (None, false) => AblationSpec::from_labels(&rows)?,
                (None, true) => return Err(Failure::Usage("give --spec FILE or --rows A1,A11,...".into())),
            };
            let cfg = load_config(&cfg)?;
            cmd_ablate(&read_dataset(&data)?, cfg, spec, out_dir.as_deref())
        }
        Command::Gradcheck { h, target, seed } => cmd_gradcheck(h, &target, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Exit(code)) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(EXIT_DIVERGED),
                _ => ExitCode::from(EXIT_USAGE),
            }
        }
    }
}
