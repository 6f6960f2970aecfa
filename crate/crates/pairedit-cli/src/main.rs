//! Command-line harness. Every subcommand is a pure function of its config
//! and seed: identical invocations write identical bytes.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config), 2
//! runtime or numerical failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pairedit::checkpoint::Snapshot;
use pairedit::config::{Config, SampleConfig};
use pairedit::dataset::{self, build_dataset, InstanceRecord, LoadedDataset, Manifest};
use pairedit::evaluate::{self, Split};
use pairedit::image::Image;
use pairedit::model::Model;
use pairedit::train::Session;
use pairedit::{ablate, editor, gradcheck, kernels, metrics, train, Error, Result};

#[derive(Parser)]
#[command(name = "pairedit", version, about = "Pair-conditioned image editing at toy scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural editing dataset described by a config file
    Datagen(DatagenArgs),
    /// Train a model: fresh from a config, resumed from a checkpoint, or
    /// fine-tuned from a checkpoint under a new config
    Train(TrainArgs),
    /// Run one edit through a trained model and write the result as PPM
    Sample(SampleArgs),
    /// Sample and score every evaluation instance of a split
    Eval(EvalArgs),
    /// Train matched model variants and the pair-disambiguation benchmark
    Ablate(AblateArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Config file
    #[arg(long)]
    config: PathBuf,
    /// Write the dataset here instead of the configured data_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the generation seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; omit it to resume a checkpoint under its own config
    #[arg(long, required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    /// Alone: resume this run exactly (optimizer moments and RNG state
    /// restored). With --config: start a new run from these weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write checkpoints and the loss log here instead of out_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override train.seed (new runs only)
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.steps (the total budget, not an increment)
    #[arg(long)]
    steps: Option<usize>,
    /// Override the adapter fusion weight (new runs only)
    #[arg(long)]
    alpha: Option<f64>,
    /// Override run.threads
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset instance selector "task:query" (task name or id, query
    /// pair index); prints MSE against the stored ground truth
    #[arg(long, conflicts_with_all = ["prompt_src", "prompt_tar", "src", "instruction"])]
    instance: Option<String>,
    /// Dataset root for --instance; defaults to the checkpoint's data_dir
    #[arg(long)]
    data: Option<PathBuf>,
    /// Exemplar source image (PPM), for sampling outside the dataset
    #[arg(long, requires_all = ["prompt_tar", "src", "instruction"])]
    prompt_src: Option<PathBuf>,
    /// Exemplar target image (PPM)
    #[arg(long)]
    prompt_tar: Option<PathBuf>,
    /// Query source image (PPM) the edit is applied to
    #[arg(long)]
    src: Option<PathBuf>,
    /// Instruction name ("invert", ...; "none" for the empty instruction)
    #[arg(long)]
    instruction: Option<String>,
    /// Output PPM path
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed; for --instance this is the base the per-instance
    /// seed derives from, matching eval reports
    #[arg(long)]
    seed: Option<u64>,
    /// Override sample.steps
    #[arg(long)]
    steps: Option<usize>,
    /// Override sample.guidance
    #[arg(long)]
    guidance: Option<f64>,
    /// Override the adapter fusion weight
    #[arg(long)]
    alpha: Option<f64>,
    /// Override run.threads
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// "seen" or "unseen"
    #[arg(long)]
    split: String,
    /// Dataset root; defaults to the checkpoint's data_dir
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory; defaults to the checkpoint's out_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed for per-instance sampling seeds
    #[arg(long)]
    seed: Option<u64>,
    /// Override sample.steps
    #[arg(long)]
    steps: Option<usize>,
    /// Override sample.guidance
    #[arg(long)]
    guidance: Option<f64>,
    /// Override the adapter fusion weight
    #[arg(long)]
    alpha: Option<f64>,
    /// Override run.threads
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// Config file; its dataset must already exist
    #[arg(long)]
    config: PathBuf,
    /// Report directory; defaults to out_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override train.seed for the matched runs
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.steps for the matched runs
    #[arg(long)]
    steps: Option<usize>,
    /// Override run.threads
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Base seed
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// How many seeds to run the primitive suite under
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version surface as Err but are not failures
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.cmd {
        Cmd::Datagen(a) => cmd_datagen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dataset_summary(manifest: &Manifest) -> String {
    let mut s = String::new();
    s.push_str("task  name             category   split   pairs  train  eval\n");
    for t in &manifest.tasks {
        let train = manifest.train_instances.iter().filter(|i| i.task_id == t.task_id).count();
        let eval = manifest.eval_instances.iter().filter(|i| i.task_id == t.task_id).count();
        let split = if t.seen { "seen" } else { "unseen" };
        s.push_str(&format!(
            "{:<5} {:<16} {:<10} {:<7} {:>5}  {:>5} {:>5}\n",
            t.task_id,
            t.name,
            t.category.to_string(),
            split,
            t.pairs.len(),
            train,
            eval
        ));
    }
    s.push_str(&format!(
        "total {} tasks, {} train instances, {} eval instances\n",
        manifest.task_count, manifest.train_instance_count, manifest.eval_instance_count
    ));
    s
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.paths.data_dir = out;
    }
    cfg.validate()?;
    kernels::configure_threads(cfg.threads);
    let manifest = build_dataset(&cfg.dataset_config())?;
    let summary = dataset_summary(&manifest);
    print!("{summary}");
    let path = cfg.paths.data_dir.join("summary.txt");
    fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let session: Session<f32> = match (&a.config, &a.checkpoint) {
        (Some(path), ckpt) => {
            let mut cfg = Config::load(path)?;
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
            }
            if let Some(steps) = a.steps {
                cfg.train.steps = steps;
            }
            if let Some(alpha) = a.alpha {
                cfg.alpha = alpha;
            }
            if let Some(threads) = a.threads {
                cfg.threads = threads;
            }
            cfg.validate()?;
            match ckpt {
                Some(ckpt) => Session::fine_tune(&cfg, &Snapshot::load(ckpt)?)?,
                None => Session::fresh(&cfg)?,
            }
        }
        (None, Some(ckpt)) => {
            if a.seed.is_some() || a.alpha.is_some() {
                return Err(Error::Config(
                    "--seed and --alpha only apply to new runs; resuming restores them \
                     from the checkpoint (pass --config to fine-tune instead)"
                        .into(),
                ));
            }
            let mut session = Session::resume(&Snapshot::load(ckpt)?)?;
            if let Some(steps) = a.steps {
                session.cfg.train.steps = steps;
            }
            if let Some(threads) = a.threads {
                session.cfg.threads = threads;
            }
            session.cfg.validate()?;
            session
        }
        (None, None) => unreachable!("clap requires --config or --checkpoint"),
    };
    kernels::configure_threads(session.cfg.threads);
    let data = LoadedDataset::open(&session.cfg.paths.data_dir)?;
    let out_dir = a.out.unwrap_or_else(|| session.cfg.paths.out_dir.clone());
    let start_step = session.step;
    let started = Instant::now();
    let (session, report) = train::run(session, &data, &out_dir)?;
    // wall time goes to stdout, not the loss log, so reruns stay
    // byte-identical
    let elapsed = started.elapsed().as_secs_f64();
    match report.losses.last() {
        Some(&(step, loss)) => println!(
            "trained steps {}..{} in {elapsed:.1}s, final loss {loss:.6}",
            start_step + 1,
            step
        ),
        None => println!("nothing to do: run already at step {}", session.step),
    }
    println!("checkpoint {}", report.final_checkpoint.display());
    Ok(())
}

/// Restore just the model from a checkpoint, with sampling-time overrides.
fn restore_model(
    snap: &Snapshot,
    alpha: Option<f64>,
    threads: Option<usize>,
) -> Result<(Model<f32>, Config)> {
    let session: Session<f32> = Session::resume(snap)?;
    let cfg = session.cfg;
    let mut model = session.model;
    if let Some(alpha) = alpha {
        if !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {alpha}")));
        }
        model.alpha = alpha;
    }
    kernels::configure_threads(threads.unwrap_or(cfg.threads));
    Ok((model, cfg))
}

/// Parse "task:query" against the manifest; task may be a name or an id.
/// Evaluation instances are searched first, then training instances.
fn find_instance<'a>(data: &'a LoadedDataset, selector: &str) -> Result<&'a InstanceRecord> {
    let (task_part, query_part) = selector.split_once(':').ok_or_else(|| {
        Error::Config(format!("instance selector must be task:query, got '{selector}'"))
    })?;
    let task_id = match task_part.parse::<usize>() {
        Ok(id) => id,
        Err(_) => {
            let t = data
                .manifest
                .tasks
                .iter()
                .find(|t| t.name == task_part)
                .ok_or_else(|| Error::Config(format!("no task named '{task_part}'")))?;
            t.task_id
        }
    };
    let query: usize = query_part
        .parse()
        .map_err(|_| Error::Config(format!("bad query index '{query_part}'")))?;
    data.manifest
        .eval_instances
        .iter()
        .chain(&data.manifest.train_instances)
        .find(|i| i.task_id == task_id && i.query_index == query)
        .ok_or_else(|| {
            Error::Config(format!("no instance with task {task_id} and query index {query}"))
        })
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let snap = Snapshot::load(&a.checkpoint)?;
    let (model, cfg) = restore_model(&snap, a.alpha, a.threads)?;
    let steps = a.steps.unwrap_or(cfg.sample.steps);
    let guidance = a.guidance.unwrap_or(cfg.sample.guidance);
    let base_seed = a.seed.unwrap_or(cfg.train.seed);

    let (pred, gt) = if let Some(selector) = &a.instance {
        let root = a.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
        let data = LoadedDataset::open(&root)?;
        let rec = find_instance(&data, selector)?;
        let (p_src, p_tar) = data.prompt_pair(rec);
        let (q_src, q_tar) = data.query_pair(rec);
        let pred = editor::edit(
            &model,
            p_src,
            p_tar,
            q_src,
            rec.instruction_id,
            steps,
            guidance,
            evaluate::instance_seed(base_seed, rec),
        )?;
        (pred, Some(q_tar.clone()))
    } else {
        let (Some(p_src), Some(p_tar), Some(src), Some(instruction)) =
            (&a.prompt_src, &a.prompt_tar, &a.src, &a.instruction)
        else {
            return Err(Error::Config(
                "pass --instance, or all of --prompt-src --prompt-tar --src --instruction".into(),
            ));
        };
        let p_src = Image::read_ppm(p_src)?;
        let p_tar = Image::read_ppm(p_tar)?;
        let src = Image::read_ppm(src)?;
        let instruction_id = if instruction == "none" {
            dataset::empty_instruction_id()
        } else {
            dataset::op_by_name(instruction)?.0
        };
        let pred =
            editor::edit(&model, &p_src, &p_tar, &src, instruction_id, steps, guidance, base_seed)?;
        (pred, None)
    };

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    pred.write_ppm(&a.out)?;
    println!("wrote {}", a.out.display());
    if let Some(gt) = gt {
        println!("mse vs ground truth: {:.6}", metrics::mse(&pred, &gt)?);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let snap = Snapshot::load(&a.checkpoint)?;
    let (model, cfg) = restore_model(&snap, a.alpha, a.threads)?;
    let root = a.data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let data = LoadedDataset::open(&root)?;
    let sample = SampleConfig {
        steps: a.steps.unwrap_or(cfg.sample.steps),
        guidance: a.guidance.unwrap_or(cfg.sample.guidance),
    };
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let report = evaluate::evaluate(&model, &data, split, &sample, seed)?;
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.clone());
    evaluate::write_report(&report, &out)?;
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(threads) = a.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    kernels::configure_threads(cfg.threads);
    let report = ablate::run_ablation::<f32>(&cfg, &ablate::BenchmarkSpec::default())?;
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.clone());
    report.write(&out)?;
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let started = Instant::now();
    // worst error per primitive across seeds, in first-seen order
    let mut worst: Vec<(String, f64)> = Vec::new();
    for i in 0..a.seeds {
        for outcome in gradcheck::run_full_suite(a.seed.wrapping_add(i))? {
            match worst.iter_mut().find(|(name, _)| *name == outcome.primitive) {
                Some((_, e)) => *e = e.max(outcome.max_rel_err),
                None => worst.push((outcome.primitive, outcome.max_rel_err)),
            }
        }
    }
    let micro = gradcheck::check_micro_model(a.seed)?;
    worst.push((micro.primitive, micro.max_rel_err));
    for (name, err) in &worst {
        println!("{name:<16} max rel err {err:.3e}");
    }
    println!(
        "checked {} functions over {} seeds in {:.2}s, all within {:.0e}",
        worst.len(),
        a.seeds,
        started.elapsed().as_secs_f64(),
        gradcheck::DEFAULT_TOL
    );
    Ok(())
}
