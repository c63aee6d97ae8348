use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rwkv_core::bench::{bench_baseline_attention, bench_generation, plot_script, write_csv, BenchRecord};
use rwkv_core::infer::{generate, SamplerConfig};
use rwkv_core::init::{init_model, InitSpec};
use rwkv_core::model::{flops_per_token, param_count, ModelConfig};
use rwkv_core::tensor::set_threads;
use rwkv_core::train::{train_run, EmbeddingInit, RunOptions, TrainConfig};
use rwkv_core::weights::load_weights;
use rwkv_core::{selftest, Error};

#[derive(Parser, Debug)]
#[command(name = "rwkv", version, about = "Train, sample and benchmark RWKV language models")]
struct Cli {
    /// Worker threads for the matrix kernels.
    #[arg(long, global = true, env = "RWKV_SPEC_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a byte-level model on a raw text file.
    Train(TrainArgs),
    /// Continue a prompt with a trained model.
    Generate(GenerateArgs),
    /// Time token-by-token decoding and write a CSV.
    Bench(BenchArgs),
    /// Print size and per-token cost of a model.
    Inspect(InspectArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

/// Model shape; a config file supplies defaults and flags override it.
#[derive(Args, Debug, Clone)]
struct ShapeArgs {
    /// Model config JSON (vocab, dim, layers, ctx_len, optional ffn_dim).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Channel-mix hidden width (default 4 * dim).
    #[arg(long)]
    ffn_dim: Option<usize>,
}

impl ShapeArgs {
    fn resolve(&self, base: ModelConfig) -> Result<ModelConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load_json(p)?,
            None => base,
        };
        if let Some(d) = self.dim {
            cfg.dim = d;
            cfg.ffn_dim = 4 * d;
        }
        cfg.vocab = self.vocab.unwrap_or(cfg.vocab);
        cfg.layers = self.layers.unwrap_or(cfg.layers);
        cfg.ffn_dim = self.ffn_dim.unwrap_or(cfg.ffn_dim);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum EmbInit {
    SmallUniform,
    BaselineNormal,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Raw byte corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Training config JSON; flags below override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Learning-rate schedule of a named size (169m, 430m, 1.5b, 3b, 7b, 14b).
    #[arg(long, default_value = "169m")]
    lr_preset: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    end_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    ctx: Option<usize>,
    #[arg(long)]
    z_coeff: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, value_enum)]
    embedding_init: Option<EmbInit>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON-lines log, one record per step.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for checkpoints; `final.rwkv` is written at the end.
    #[arg(long, default_value = "checkpoints")]
    out_dir: PathBuf,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a weight file (context may grow to --ctx).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Leave wall time out of the log so that reruns are byte-identical.
    #[arg(long)]
    no_wall_time: bool,
    /// Do not print progress to stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Bytes to generate.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// 0 picks the most likely byte every time.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Weight file; without it a freshly initialized model is timed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Time the quadratic attention baseline instead.
    #[arg(long)]
    baseline: bool,
    /// Timed tokens.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Untimed tokens before measurement.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write a gnuplot script plotting the CSV.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Named size: 169m, 430m, 1.5b, 3b, 7b, 14b.
    #[arg(long, conflicts_with_all = ["weights", "config"])]
    preset: Option<String>,
    /// Weight file to read the config from.
    #[arg(long, conflicts_with = "config")]
    weights: Option<PathBuf>,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |source| {
        Failure::Runtime(Error::Io {
            path: path.into(),
            source,
        })
    }
}

fn default_shape() -> ModelConfig {
    ModelConfig::byte_level(128, 4, 256)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    if !a.corpus.is_file() {
        return Err(Failure::Usage(format!(
            "corpus {} does not exist\n\nUsage: rwkv train --corpus <CORPUS> [OPTIONS]",
            a.corpus.display()
        )));
    }
    let model_cfg = a.shape.resolve(default_shape())?;
    let mut tc = match &a.train_config {
        Some(p) => TrainConfig::load_json(p)?,
        None => TrainConfig::preset(&a.lr_preset, a.steps.unwrap_or(2000))
            .ok_or_else(|| Failure::Usage(format!("unknown --lr-preset {}", a.lr_preset)))?,
    };
    if let Some(s) = a.steps {
        tc.total_steps = s;
        if a.train_config.is_none() && a.warmup.is_none() {
            tc.warmup_steps = TrainConfig::preset(&a.lr_preset, s).map_or(0, |p| p.warmup_steps);
        }
    }
    tc.warmup_steps = a.warmup.unwrap_or(tc.warmup_steps);
    tc.init_lr = a.lr.unwrap_or(tc.init_lr);
    tc.end_lr = a.end_lr.unwrap_or(tc.end_lr);
    tc.batch = a.batch.unwrap_or(tc.batch);
    tc.ctx = a.ctx.unwrap_or(tc.ctx);
    tc.z_coeff = a.z_coeff.unwrap_or(tc.z_coeff);
    tc.seed = a.seed.unwrap_or(tc.seed);
    tc.checkpoint_every = a.checkpoint_every.unwrap_or(tc.checkpoint_every);
    if a.grad_clip.is_some() {
        tc.grad_clip = a.grad_clip;
    }
    if let Some(e) = a.embedding_init {
        tc.embedding_init = match e {
            EmbInit::SmallUniform => EmbeddingInit::SmallUniform,
            EmbInit::BaselineNormal => EmbeddingInit::BaselineNormal,
        };
    }
    tc.validate()?;
    let opts = RunOptions {
        log_path: a.log.clone(),
        checkpoint_dir: Some(a.out_dir.clone()),
        wall_time: !a.no_wall_time,
        resume: a.resume.clone(),
    };
    let total = tc.total_steps;
    let quiet = a.quiet;
    let out = train_run::<f64>(&model_cfg, &tc, &a.corpus, &opts, |r| {
        if !quiet && (r.step % 10 == 0 || r.step + 1 == total) {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}  bpc {:.4}", r.step, r.lr, r.loss, r.bpc);
        }
    })?;
    if !quiet {
        eprintln!(
            "wrote {} ({} steps)",
            a.out_dir.join("final.rwkv").display(),
            out.log.len()
        );
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Failure> {
    let sc = SamplerConfig {
        temperature: a.temperature,
        top_p: a.top_p,
        seed: a.seed,
    };
    sc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.prompt.is_empty() {
        return Err(Failure::Usage("--prompt must not be empty".into()));
    }
    let model = load_weights::<f64>(&a.weights)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut write_err = None;
    generate(&model, a.prompt.as_bytes(), a.n, &sc, |b| {
        if write_err.is_none() {
            if let Err(e) = out.write_all(&[b]).and_then(|_| out.flush()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(Path::new("<stdout>"))(e));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    if a.n < 100 {
        return Err(Failure::Usage("--n must be at least 100".into()));
    }
    let records: Vec<BenchRecord> = if a.baseline {
        let cfg = a.shape.resolve(ModelConfig::byte_level(512, 1, 4096))?;
        bench_baseline_attention::<f64>(&cfg, a.n)?
    } else {
        let model = match &a.weights {
            Some(p) => load_weights::<f64>(p)?,
            None => {
                let cfg = a.shape.resolve(default_shape())?;
                init_model(&cfg, &InitSpec::with_seed(a.seed))?
            }
        };
        bench_generation(&model, a.n, a.warmup)?
    };
    let f = File::create(&a.out).map_err(io_err(&a.out))?;
    let mut w = BufWriter::new(f);
    write_csv(&records, &mut w)
        .and_then(|_| w.flush())
        .map_err(io_err(&a.out))?;
    if let Some(p) = &a.plot {
        let csv = a.out.display().to_string();
        let png = a.out.with_extension("png").display().to_string();
        std::fs::write(p, plot_script(&[&csv], &png)).map_err(io_err(p))?;
    }
    let last = records.last().expect("n >= 100");
    eprintln!(
        "{} tokens in {:.1} ms ({:.4} ms/token), {} state scalars",
        records.len(),
        last.cumulative_ms,
        last.cumulative_ms / records.len() as f64,
        last.state_scalars
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Failure> {
    let cfg = if let Some(name) = &a.preset {
        ModelConfig::preset(name).ok_or_else(|| Failure::Usage(format!("unknown preset {name}")))?
    } else if let Some(p) = &a.weights {
        load_weights::<f64>(p)?.config
    } else {
        a.shape.resolve(ModelConfig::byte_level(128, 4, 256))?
    };
    let params = param_count(&cfg)?;
    let flops = flops_per_token(&cfg)?;
    if a.json {
        let v = serde_json::json!({
            "vocab": cfg.vocab,
            "dim": cfg.dim,
            "layers": cfg.layers,
            "ffn_dim": cfg.ffn_dim,
            "ctx_len": cfg.ctx_len,
            "parameters": params,
            "flops_per_token": flops,
            "state_scalars": 5 * cfg.dim * cfg.layers,
        });
        println!("{v}");
    } else {
        println!("vocab            {}", cfg.vocab);
        println!("dim              {}", cfg.dim);
        println!("layers           {}", cfg.layers);
        println!("ffn_dim          {}", cfg.ffn_dim);
        println!("ctx_len          {}", cfg.ctx_len);
        println!("parameters       {params} ({params:.3e})");
        println!("flops/token      {flops} ({flops:.3e})");
        println!("state scalars    {}", 5 * cfg.dim * cfg.layers);
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), Failure> {
    let results = selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {:<22} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(Error::InvalidConfig(format!(
            "{failed} of {} suites failed",
            results.len()
        ))));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    set_threads(cli.threads);
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
