use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixprec::diagnostics::{ExponentHistogram, DEFAULT_THRESHOLDS};
use mixprec::harness::{compare, emit_plot, run, RunConfig, DATA_DIR_ENV};
use mixprec::nn::Checkpoint;
use mixprec::{Error, Half};

#[derive(Parser)]
#[command(name = "mixprec", version, about = "Mixed-precision training experiments with emulated binary16")]
#[command(after_help = format!(
    "MNIST runs read IDX files from ${DATA_DIR_ENV} (default data/mnist).\n\
     Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training config and write its artifacts.
    Train {
        config: PathBuf,
        /// Override `run.output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run a config once per value of one field and print a comparison table.
    ///
    /// FIELD is `section.key` (e.g. `policy.loss_scale=none,constant:8`) or
    /// `policy` with arm names (`policy=fp32,mp,mp_noscale,mp_nomaster`).
    Compare {
        config: PathBuf,
        #[arg(long, value_name = "FIELD=V1,V2,...")]
        vary: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print an underflow report for a histogram CSV or for the weights in a checkpoint.
    Histogram {
        path: PathBuf,
        /// Exponent thresholds to report (repeatable).
        #[arg(long = "threshold", allow_negative_numbers = true)]
        thresholds: Vec<i32>,
    },
    /// Plot one column of several CSV files as an SVG line chart.
    Plot {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "iteration")]
        x: String,
        #[arg(long, default_value = "loss")]
        y: String,
        /// Logarithmic y axis.
        #[arg(long)]
        log_y: bool,
    },
    /// Show the binary16 encoding of a number.
    Halfdump {
        #[arg(allow_negative_numbers = true)]
        value: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::EmptyBatch => 2,
        _ => 1,
    }
}

fn load_config(path: &Path, output_dir: Option<PathBuf>) -> mixprec::Result<RunConfig> {
    let mut c = RunConfig::load(path)?;
    if let Some(dir) = output_dir {
        c.run.output_dir = dir;
    }
    Ok(c)
}

fn train(config: &Path, output_dir: Option<PathBuf>) -> mixprec::Result<()> {
    let c = load_config(config, output_dir)?;
    let a = run(&c)?;
    let s = &a.summary;
    println!("run {} ({})", s.name, s.config_hash);
    println!("  final train loss  {:.6e}", s.final_train_loss);
    println!("  final test loss   {:.6e}", s.final_test_loss);
    println!("  final accuracy    {:.4}", s.final_accuracy);
    println!("  best accuracy     {:.4}", s.best_accuracy);
    println!("  skipped steps     {}", s.skipped_steps);
    println!("  final loss scale  {}", s.final_scale);
    println!("artifacts in {}", a.dir.display());
    Ok(())
}

fn compare_cmd(config: &Path, vary: &str, output_dir: Option<PathBuf>) -> mixprec::Result<()> {
    let c = load_config(config, output_dir)?;
    let (field, values) = vary
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--vary expects FIELD=V1,V2,..., got `{vary}`")))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config("--vary needs at least one value".into()));
    }
    let table = compare(&c.vary(field, &values)?)?;
    print!("{table}");
    fs::create_dir_all(&c.run.output_dir)?;
    let out = c.run.output_dir.join(format!("{}_compare.csv", c.run.name));
    fs::write(&out, table.to_csv())?;
    println!("summary written to {}", out.display());
    Ok(())
}

fn print_histogram(title: &str, h: &ExponentHistogram, thresholds: &[i32]) {
    println!("== {title}");
    println!("{}", h.report(thresholds));
    println!("exponent  count");
    for (e, c) in h.bins() {
        println!("{e:>8}  {c}");
    }
    println!("{:>8}  {}", "zero", h.zero_count());
    if h.nonfinite_count() > 0 {
        println!("{:>8}  {}", "nonfin", h.nonfinite_count());
    }
}

fn histogram_cmd(path: &Path, thresholds: &[i32]) -> mixprec::Result<()> {
    let thresholds = if thresholds.is_empty() { &DEFAULT_THRESHOLDS[..] } else { thresholds };
    if path.extension().is_some_and(|e| e == "csv") {
        let h = ExponentHistogram::read_csv(BufReader::new(fs::File::open(path)?))?;
        print_histogram(&path.display().to_string(), &h, thresholds);
        return Ok(());
    }
    let ck = Checkpoint::load(path)?;
    let mut by_dtype: BTreeMap<String, ExponentHistogram> = BTreeMap::new();
    for (key, t) in &ck.entries {
        if key.starts_with("param.") {
            let h = by_dtype.entry(t.dtype().to_string()).or_default();
            *h = h.merge(&ExponentHistogram::of(t))?;
        }
    }
    if by_dtype.is_empty() {
        return Err(Error::Data(format!("{}: no param.* entries", path.display())));
    }
    for (dtype, h) in &by_dtype {
        print_histogram(&format!("{} weights ({dtype})", path.display()), h, thresholds);
    }
    Ok(())
}

fn halfdump(text: &str) -> mixprec::Result<()> {
    let x: f32 = text.trim().parse().map_err(|_| Error::Config(format!("`{text}` is not a number")))?;
    let h = Half::from_f32(x);
    let bits = h.to_bits();
    println!("input      {x:e}");
    println!("binary16   0x{bits:04X}");
    println!("fields     {} {:05b} {:010b}", bits >> 15, (bits >> 10) & 0x1F, bits & 0x3FF);
    println!("value      {:e}", h.to_f32());
    match h.exponent_of() {
        Ok(e) => println!("exponent   {e}"),
        Err(_) => println!("exponent   none"),
    }
    println!("class      {}", h.classify());
    let err = f64::from(h.to_f32()) - f64::from(x);
    if x.is_finite() && h.to_f32().is_finite() {
        println!("round err  {err:e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config, output_dir } => train(&config, output_dir),
        Command::Compare { config, vary, output_dir } => compare_cmd(&config, &vary, output_dir),
        Command::Histogram { path, thresholds } => histogram_cmd(&path, &thresholds),
        Command::Plot { csvs, output, x, y, log_y } => emit_plot(&csvs, &x, &y, &output, log_y).map(|()| {
            println!("wrote {}", output.display());
        }),
        Command::Halfdump { value } => halfdump(&value),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
