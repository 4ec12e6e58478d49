mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lamate::checkpoint::{self, Checkpoint};
use lamate::data::{
    gen_corpus, gen_lm_corpus, gen_mixture, read_jsonl, read_streams, write_jsonl, write_streams, Task,
};
use lamate::decoding::{generate, greedy_batch};
use lamate::encoder::{CausalLm, EncoderConfig};
use lamate::kv::{bench_decode, paper_specs, read_specs, render_cache_table, ArchSpec, BenchConfig, Decodable};
use lamate::metrics::{evaluate, per_example_csv, Metric};
use lamate::model::{Lamate, ModelConfig};
use lamate::tensor::{Float, Partition};
use lamate::training::{lm_pretrain, train_stage1, train_stage2, StageOptions, TrainReport};

use config::{RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "lamate", version, about = "Synthetic-data pipeline for an LLM-as-encoder translation model")]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    run_dir: PathBuf,
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the full error chain with debug formatting.
    #[arg(long, global = true)]
    debug: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        /// general, doc, domain, terminology, postedit, mix or lm.
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the causal LM that later serves as the frozen encoder.
    PretrainLm {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1 (encoder frozen) or stage 2 (all parameters, task mixture).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: Option<PathBuf>,
        /// LM directory for stage 1, stage-1 model for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a JSONL corpus, one detokenized output per line.
    Generate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "predictions.txt")]
        out: PathBuf,
        #[arg(long, conflicts_with = "sample")]
        beam: Option<usize>,
        #[arg(long)]
        sample: bool,
        #[arg(long, requires = "sample")]
        temperature: Option<f64>,
        #[arg(long, requires = "sample")]
        top_k: Option<usize>,
        #[arg(long, requires = "sample")]
        top_p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against a JSONL corpus.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "bleu,tsr,hter,acc")]
        metrics: String,
        /// JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-example CSV destination.
        #[arg(long)]
        per_example: Option<PathBuf>,
    },
    /// Analytic KV-cache table.
    KvReport {
        /// JSON list of architecture specs; the built-in published set when omitted.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[arg(long, default_value_t = 1)]
        src: u64,
        #[arg(long, default_value_t = 0)]
        tgt: u64,
    },
    /// Decoding throughput of two models over a batch x source-length grid.
    Bench {
        /// Architecture spec (JSON) or trained model directory.
        #[arg(long)]
        arch_a: PathBuf,
        #[arg(long)]
        arch_b: PathBuf,
        /// `BATCHES x SOURCE_LENGTHS`, e.g. `1,2,4,8x32,64,128`.
        #[arg(long, default_value = "1,2,4,8x32,64,128")]
        grid: String,
        #[arg(long, default_value_t = 64)]
        tgt: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::PretrainLm { .. } => "pretrain-lm",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::KvReport { .. } => "kv-report",
            Command::Bench { .. } => "bench",
        }
    }
}

struct Ctx {
    run_dir: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn path(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run_dir.join(p)
        }
    }

    /// Effective configuration plus the invoking command line.
    fn snapshot(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let argv: Vec<String> = std::env::args().collect();
        let text = format!("# {}\n{}", argv.join(" "), self.cfg.to_toml());
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("LAMATE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!(UsageError(format!("LAMATE_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<lamate::Error>() {
            return if e.is_numeric_error() {
                3
            } else if e.is_data_error() {
                2
            } else {
                1
            };
        }
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let debug = cli.debug;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if debug {
                eprintln!("error: {e:?}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    // Every kernel is single-threaded, so any positive cap is honoured;
    // the variable is still validated.
    threads_from_env()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let ctx = Ctx { run_dir: cli.run_dir, cfg };
    std::fs::create_dir_all(&ctx.run_dir).with_context(|| format!("creating run dir {}", ctx.run_dir.display()))?;
    let stage = cli.cmd.name();
    ctx.snapshot(&ctx.run_dir, &format!("{stage}.config.toml"))?;
    let res = if ctx.cfg.dtype == "f64" { dispatch::<f64>(&ctx, cli.cmd) } else { dispatch::<f32>(&ctx, cli.cmd) };
    res.with_context(|| format!("{stage} failed"))
}

fn log_line(msg: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{msg}");
}

fn dispatch<T: Float>(ctx: &Ctx, cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { task, n, seed, out } => gen_data(ctx, &task, n, seed, &ctx.path(out)),
        Command::PretrainLm { data, out } => pretrain::<T>(ctx, data, out),
        Command::Train { stage, data, init, out } => train::<T>(ctx, stage, data, init, out),
        Command::Generate { model, input, out, beam, sample, temperature, top_k, top_p, seed } => {
            let mut g = ctx.cfg.generation();
            if let Some(b) = beam {
                g.beam_size = b;
            }
            g.temperature = temperature.unwrap_or(g.temperature);
            g.top_k = top_k.unwrap_or(g.top_k);
            g.top_p = top_p.unwrap_or(g.top_p);
            g.seed = seed.unwrap_or(g.seed);
            g.validate().map_err(|e| UsageError(e.to_string()))?;
            let model = ctx.path(model.unwrap_or_else(|| ctx.cfg.stage2_dir.clone().into()));
            gen_outputs::<T>(ctx, &model, &ctx.path(input), &ctx.path(out), &g, sample)
        }
        Command::Eval { data, predictions, metrics, out, per_example } => eval(
            ctx,
            &ctx.path(data),
            &ctx.path(predictions),
            &metrics,
            out.map(|p| ctx.path(p)),
            per_example.map(|p| ctx.path(p)),
        ),
        Command::KvReport { arch, batch, src, tgt } => {
            let specs = match arch {
                Some(p) => {
                    let p = ctx.path(p);
                    read_specs(&p).with_context(|| format!("reading specs {}", p.display()))?
                }
                None => paper_specs(),
            };
            print!("{}", render_cache_table(&specs, batch, src, tgt));
            Ok(())
        }
        Command::Bench { arch_a, arch_b, grid, tgt, reps, warmups, out } => {
            let (batch_sizes, source_lengths) = parse_grid(&grid)?;
            let bc = BenchConfig {
                batch_sizes,
                source_lengths,
                target_len: tgt,
                repetitions: reps,
                warmups,
                memory_budget: None,
                seed: ctx.cfg.seed,
            };
            let max_src = *bc.source_lengths.iter().max().expect("non-empty grid");
            let a = bench_model::<T>(ctx, &ctx.path(arch_a), max_src + tgt + 1)?;
            let b = bench_model::<T>(ctx, &ctx.path(arch_b), max_src + tgt + 1)?;
            let vocab = ctx.cfg.vocab().len();
            let report = bench_decode(a.as_ref(), b.as_ref(), vocab, &bc)?;
            print!("{}", report.render());
            let out = ctx.path(out);
            std::fs::write(&out, report.to_csv()).with_context(|| format!("writing {}", out.display()))
        }
    }
}

fn gen_data(ctx: &Ctx, task: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let profile = ctx.cfg.profile()?;
    let vocab = ctx.cfg.vocab();
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    match task {
        "lm" => {
            let streams = gen_lm_corpus(n, seed, &profile).map_err(|e| UsageError(e.to_string()))?;
            write_streams(out, &streams, &vocab)?;
        }
        "mix" => {
            let ex = gen_mixture(&ctx.cfg.mixture(), n, seed, &profile).map_err(|e| UsageError(e.to_string()))?;
            write_jsonl(out, &ex, &vocab)?;
        }
        t => {
            let task: Task = t.parse().map_err(|e: lamate::Error| UsageError(e.to_string()))?;
            let ex = gen_corpus(task, n, seed, &profile).map_err(|e| UsageError(e.to_string()))?;
            write_jsonl(out, &ex, &vocab)?;
        }
    }
    log_line(&format!("wrote {n} {task} records to {}", out.display()));
    Ok(())
}

fn progress(total: usize) -> impl FnMut(usize, f64) -> bool {
    let every = (total / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step == total {
            log_line(&format!("step {step}/{total} loss {loss:.4}"));
        }
        true
    }
}

fn finish(ctx: &Ctx, out: &Path, report: &TrainReport) -> Result<()> {
    let csv = out.join("losses.csv");
    report.write_csv(&csv).with_context(|| format!("writing {}", csv.display()))?;
    ctx.snapshot(out, "config.toml")?;
    log_line(&format!(
        "loss {:.4} -> {:.4} in {:.1}s, saved to {}",
        report.first_loss(),
        report.last_loss(),
        report.seconds,
        out.display()
    ));
    Ok(())
}

fn pretrain<T: Float>(ctx: &Ctx, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let data = ctx.path(data.unwrap_or_else(|| ctx.cfg.lm_data.clone().into()));
    let out = ctx.path(out.unwrap_or_else(|| ctx.cfg.lm_dir.clone().into()));
    let streams =
        read_streams(&data, &ctx.cfg.vocab()).with_context(|| format!("reading LM corpus {}", data.display()))?;
    let enc = ctx.cfg.encoder();
    let mut lm = CausalLm::<T>::new(enc.clone(), ctx.cfg.seed)?;
    let hp = ctx.cfg.lm_hp()?;
    let mut hook = progress(hp.train_steps);
    let report = lm_pretrain(&mut lm, &streams, &hp, Some(&mut hook))
        .with_context(|| format!("training on {}", data.display()))?;
    checkpoint::save(&out.join("theta.ckpt"), &lm.params, Some(Partition::Theta), serde_json::to_value(&enc)?)?;
    finish(ctx, &out, &report)
}

fn load_lm<T: Float>(cfg: &EncoderConfig, dir: &Path) -> Result<CausalLm<T>> {
    let path = dir.join("theta.ckpt");
    let ck = Checkpoint::read(&path)?;
    let stored: EncoderConfig = serde_json::from_value(ck.header.config.clone())
        .map_err(|e| lamate::Error::Checkpoint { path: path.clone(), msg: format!("encoder config: {e}") })?;
    if &stored != cfg {
        bail!(UsageError(format!("{} holds encoder {stored:?}, configuration asks for {cfg:?}", path.display())));
    }
    let mut lm = CausalLm::<T>::new(stored, 0)?;
    ck.load_into(&mut lm.params)?;
    Ok(lm)
}

fn check_model(path: &Path, loaded: &ModelConfig, wanted: &ModelConfig) -> Result<()> {
    if loaded != wanted {
        bail!(UsageError(format!("{} was trained with a different model configuration", path.display())));
    }
    Ok(())
}

fn train<T: Float>(
    ctx: &Ctx,
    stage: u8,
    data: Option<PathBuf>,
    init: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let hp = cfg.stage_hp(stage)?;
    let wanted = cfg.model()?;
    let (default_data, default_init, default_out) = match stage {
        1 => (&cfg.train_data, &cfg.lm_dir, &cfg.stage1_dir),
        _ => (&cfg.mix_data, &cfg.stage1_dir, &cfg.stage2_dir),
    };
    let data = ctx.path(data.unwrap_or_else(|| default_data.into()));
    let init = ctx.path(init.unwrap_or_else(|| default_init.into()));
    let out = ctx.path(out.unwrap_or_else(|| default_out.into()));
    let examples = read_jsonl(&data, &cfg.vocab()).with_context(|| format!("reading corpus {}", data.display()))?;
    let mut hook = progress(hp.train_steps);
    let (model, report) = if stage == 1 {
        let lm = load_lm::<T>(&wanted.encoder, &init).with_context(|| format!("loading LM from {}", init.display()))?;
        let mut m = Lamate::<T>::new(wanted, cfg.seed)?;
        m.load_encoder_from(&lm.params)?;
        let before = m.params.hash(Partition::Theta);
        let r = train_stage1(&mut m, &examples, &hp, &StageOptions::default(), Some(&mut hook))
            .with_context(|| format!("training on {}", data.display()))?;
        let after = m.params.hash(Partition::Theta);
        if before != after {
            bail!("encoder parameters changed during stage 1");
        }
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("theta.sha256"), format!("{after}\n"))?;
        (m, r)
    } else {
        let mut m =
            Lamate::<T>::load_dir(&init).with_context(|| format!("loading stage-1 model from {}", init.display()))?;
        check_model(&init, m.cfg(), &wanted)?;
        let r = train_stage2(&mut m, &examples, &hp, Some(&mut hook))
            .with_context(|| format!("training on {}", data.display()))?;
        (m, r)
    };
    model.save_dir(&out)?;
    finish(ctx, &out, &report)
}

fn gen_outputs<T: Float>(
    ctx: &Ctx,
    model_dir: &Path,
    input: &Path,
    out: &Path,
    g: &lamate::decoding::GenerationConfig,
    sampling: bool,
) -> Result<()> {
    let vocab = ctx.cfg.vocab();
    let model =
        Lamate::<T>::load_dir(model_dir).with_context(|| format!("loading model from {}", model_dir.display()))?;
    let examples = read_jsonl(input, &vocab).with_context(|| format!("reading inputs {}", input.display()))?;
    let outputs: Vec<Vec<usize>> = if !sampling && g.beam_size == 1 {
        let inputs: Vec<(&[usize], &[usize])> =
            examples.iter().map(|e| (e.prompt.as_slice(), e.source.as_slice())).collect();
        greedy_batch(&model, &inputs, g.max_len)?
    } else {
        examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let cfg = lamate::decoding::GenerationConfig { seed: g.seed.wrapping_add(i as u64), ..g.clone() };
                generate(&model, &e.prompt, &e.source, &cfg, sampling)
                    .map(|h| h.output(Some(lamate::data::EOS)).to_vec())
                    .with_context(|| format!("decoding record {}", i + 1))
            })
            .collect::<Result<_>>()?
    };
    let mut text = String::new();
    for o in &outputs {
        text.push_str(&vocab.detokenize(o)?);
        text.push('\n');
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    log_line(&format!("decoded {} records to {}", outputs.len(), out.display()));
    Ok(())
}

fn eval(
    ctx: &Ctx,
    data: &Path,
    preds: &Path,
    metrics: &str,
    out: Option<PathBuf>,
    per_example: Option<PathBuf>,
) -> Result<()> {
    let vocab = ctx.cfg.vocab();
    let metrics = Metric::parse_list(metrics).map_err(|e| UsageError(e.to_string()))?;
    let examples = read_jsonl(data, &vocab).with_context(|| format!("reading references {}", data.display()))?;
    let text = std::fs::read_to_string(preds).with_context(|| format!("reading predictions {}", preds.display()))?;
    let predictions = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            vocab
                .tokenize(l.trim_end_matches('\r'))
                .map_err(|e| lamate::Error::Data { line: i + 1, msg: e.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("reading predictions {}", preds.display()))?;
    if predictions.len() != examples.len() {
        bail!(lamate::Error::Data {
            line: predictions.len().min(examples.len()) + 1,
            msg: format!("{} predictions for {} references", predictions.len(), examples.len()),
        });
    }
    let report = evaluate(&examples, &predictions, &metrics)?;
    println!("{:<12} {:>6} {}", "task", "n", metrics.iter().map(|m| format!("{:>8}", m.name())).collect::<String>());
    for (task, scores) in &report.tasks {
        let cells: String = metrics
            .iter()
            .map(|m| scores.get(m.name()).map_or(format!("{:>8}", "-"), |v| format!("{v:>8.4}")))
            .collect();
        println!("{task:<12} {:>6} {cells}", report.counts.get(task).copied().unwrap_or(0));
    }
    if let Some(p) = out {
        std::fs::write(&p, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = per_example {
        std::fs::write(&p, per_example_csv(&examples, &predictions))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().ok().filter(|&n| n > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| UsageError(format!("bad grid list {s:?}")).into())
}

fn parse_grid(grid: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, s) =
        grid.split_once('x').ok_or_else(|| UsageError(format!("grid must be BATCHESxLENGTHS, got {grid:?}")))?;
    Ok((parse_list(b)?, parse_list(s)?))
}

/// A model for the benchmark: a trained LaMaTE directory, or a spec file
/// instantiated with random weights. Encoder-decoder specs take their
/// encoder head counts from the run configuration.
fn bench_model<T: Float>(ctx: &Ctx, path: &Path, max_len: usize) -> Result<Box<dyn Decodable>> {
    if path.is_dir() {
        let m = Lamate::<T>::load_dir(path).with_context(|| format!("loading model from {}", path.display()))?;
        return Ok(Box::new(m));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    let spec: ArchSpec = serde_json::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))?;
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let cfg = &ctx.cfg;
    let vocab = cfg.vocab().len();
    if spec.is_decoder_only() {
        let enc = EncoderConfig {
            layers: spec.dec_layers,
            dim: spec.dim,
            heads: spec.heads,
            kv_heads: spec.kv_heads,
            vocab_size: vocab,
            max_len,
            groups: 1,
            rope_base: cfg.rope_base,
        };
        return Ok(Box::new(CausalLm::<T>::new(enc, cfg.seed)?));
    }
    let mut mc = cfg.model()?;
    let enc_dim = spec.enc_dim.unwrap_or(spec.dim);
    mc.encoder.layers = spec.enc_layers;
    mc.encoder.dim = enc_dim;
    mc.encoder.max_len = max_len;
    if spec.enc_layers % mc.encoder.groups != 0 {
        mc.encoder.groups = 1;
    }
    mc.adaptor.groups = mc.encoder.groups;
    mc.adaptor.d1 = enc_dim;
    mc.adaptor.d2 = spec.dim;
    mc.decoder.layers = spec.dec_layers;
    mc.decoder.dim = spec.dim;
    mc.decoder.heads = spec.heads;
    mc.validate().map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    Ok(Box::new(Lamate::<T>::new(mc, cfg.seed)?))
}
