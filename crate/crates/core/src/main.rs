use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use soft_forge::analysis::{positional_matrix, AnalysisOptions, HiddenState, KlDirection, Metric, ModelRef};
use soft_forge::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use soft_forge::config::RunConfig;
use soft_forge::data::{load_instruction_dataset, load_prompts, render, tokenize_records};
use soft_forge::inference::{exit_nll, generate, GenerationRequest, HeadChoice, EVAL_BATCH_SIZE};
use soft_forge::model::{Parameters, PerExitHeads};
use soft_forge::tournament::{
    builtin_judge, ingest_tallies, run_tournament, Contestant, GenerationSettings, JudgeConfig, JudgeKind,
    TournamentMatrix,
};
use soft_forge::training::{adapt_exit_heads, gradient_check, train, GradCheckConfig, TrainMode};
use soft_forge::{par, Error};

/// Exit code for a gradient check that ran but did not pass.
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "soft-forge",
    version,
    about = "Train and evaluate many-in-one decoder transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Soft,
    SoftSampled,
    Sft,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Soft => TrainMode::SoftSum,
            Mode::SoftSampled => TrainMode::SoftSampled,
            Mode::Sft => TrainMode::Sft,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Heads {
    Shared,
    Adapted,
}

impl From<Heads> for HeadChoice {
    fn from(h: Heads) -> Self {
        match h {
            Heads::Shared => HeadChoice::Shared,
            Heads::Adapted => HeadChoice::Adapted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Kl,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Overlap,
    Loglik,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes checkpoint.srtd and train_report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train per-exit copies of the final norm and head on frozen blocks.
    AdaptHeads {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Greedy generation from one exit for every prompt in a JSONL file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        exit: usize,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long, default_value_t = 256)]
        max_new: usize,
        #[arg(long, value_enum, default_value = "shared")]
        heads: Heads,
        /// Write JSON lines here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-exit loss and perplexity on an instruction dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "shared")]
        heads: Heads,
        /// Score prompt tokens as well as responses.
        #[arg(long)]
        no_mask_prompt: bool,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Positional KL or cosine matrix of every exit against a reference exit.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        /// Compare against this checkpoint's own full exit.
        #[arg(long, conflicts_with = "reference")]
        self_reference: bool,
        /// Checkpoint providing the reference exit.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Reference exit depth; defaults to the reference model's full depth.
        #[arg(long)]
        reference_exit: Option<usize>,
        #[arg(long, default_value_t = 32)]
        positions: usize,
        /// Report KL(reference || exit) instead of KL(exit || reference).
        #[arg(long)]
        reverse_kl: bool,
        /// Compare hidden states after the final norm.
        #[arg(long)]
        post_norm: bool,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Pairwise tournament over every exit of the given checkpoints, or
    /// replay of recorded tallies with --ingest.
    Tournament {
        #[arg(long, conflicts_with_all = ["checkpoint", "instructions"])]
        ingest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        instructions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "overlap")]
        judge: JudgeArg,
        /// Scorer checkpoint for the loglik judge.
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        max_new: usize,
        /// JSON file with judge tie thresholds.
        #[arg(long)]
        judge_config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Finite-difference check of the multi-exit gradient on the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn threads_from_env() -> anyhow::Result<usize> {
    match std::env::var("SOFT_FORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("SOFT_FORGE_THREADS must be a positive integer, got {v:?}")).into()),
        },
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Diverged { .. } | Error::NumericFailure(_) => 3,
        Error::Parse { .. }
        | Error::Schema { .. }
        | Error::Io { .. }
        | Error::InvalidToken { .. }
        | Error::SequenceTooLong { .. }
        | Error::EmptyLoss
        | Error::NotACheckpoint(_)
        | Error::UnsupportedVersion(_)
        | Error::Corrupt(_)
        | Error::Evaluation { .. } => 2,
        _ => 1,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

type Loaded = (Parameters<f32>, Option<PerExitHeads<f32>>, CheckpointMeta);

fn load(path: &Path) -> anyhow::Result<Loaded> {
    Ok(load_checkpoint::<f32>(path)?)
}

fn cmd_train(
    config: &Path,
    mode: Option<Mode>,
    steps: Option<usize>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = mode {
        cfg.train.mode = m.into();
    }
    if let Some(s) = steps {
        cfg.train.max_steps = Some(s);
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    cfg.validate()?;
    let train_path = cfg.require("train")?.to_path_buf();
    let val_path = cfg
        .data
        .val
        .is_some()
        .then(|| cfg.require("val"))
        .transpose()?
        .map(Path::to_path_buf);

    let train_data = tokenize_records(&load_instruction_dataset(&train_path)?, cfg.train.mask_prompt);
    let val_data = match &val_path {
        Some(p) => tokenize_records(&load_instruction_dataset(p)?, cfg.train.mask_prompt),
        None => Vec::new(),
    };
    let params = Parameters::<f32>::init(&cfg.model, cfg.seed)?;
    let (params, report) = train(params, &cfg.exits, &train_data, &val_data, &cfg.train)?;

    ensure_dir(&cfg.output_dir)?;
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        exits: cfg.exits.clone(),
        train: Some(cfg.train.clone()),
        seed: cfg.seed,
    };
    save_checkpoint(&params, None, &meta, cfg.output_dir.join("checkpoint.srtd"))?;
    write_json(&cfg.output_dir.join("train_report.json"), &report)?;
    if let Some(v) = report.final_validation() {
        for (d, l) in v {
            println!("exit {d}: val loss {l:.4}");
        }
    }
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_adapt(
    config: &Path,
    checkpoint: &Path,
    steps: Option<usize>,
    output_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = steps {
        cfg.train.max_steps = Some(s);
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    let (params, _, meta) = load(checkpoint)?;
    let data = tokenize_records(&load_instruction_dataset(cfg.require("train")?)?, cfg.train.mask_prompt);
    let (heads, report) = adapt_exit_heads(&params, &meta.exits, &data, &cfg.train)?;
    ensure_dir(&cfg.output_dir)?;
    save_checkpoint(&params, Some(&heads), &meta, cfg.output_dir.join("adapted.srtd"))?;
    write_json(&cfg.output_dir.join("adapt_report.json"), &report)?;
    println!("wrote {}", cfg.output_dir.join("adapted.srtd").display());
    Ok(())
}

#[derive(Serialize)]
struct GeneratedLine<'a> {
    index: usize,
    exit: usize,
    prompt: &'a str,
    response: String,
}

fn cmd_generate(
    checkpoint: &Path,
    exit: usize,
    prompt_file: &Path,
    max_new: usize,
    heads: Heads,
    output: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (params, adapted, meta) = load(checkpoint)?;
    meta.exits.check_depth(exit)?;
    let prompts = load_prompts(prompt_file)?;
    let mut out = String::new();
    for (index, rec) in prompts.iter().enumerate() {
        let prompt = render(rec);
        let gen = generate(
            &params,
            &meta.exits,
            adapted.as_ref(),
            &GenerationRequest {
                prompt: prompt.clone(),
                exit_depth: exit,
                max_new_tokens: max_new,
                head_source: heads.into(),
            },
        )?;
        out.push_str(&serde_json::to_string(&GeneratedLine {
            index,
            exit,
            prompt: &rec.instruction,
            response: gen.text,
        })?);
        out.push('\n');
    }
    match output {
        Some(p) => fs::write(&p, out).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    exit: usize,
    loss: f64,
    perplexity: f64,
    tokens: usize,
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    checkpoint: String,
    heads: HeadChoice,
    rows: Vec<EvalRow>,
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    heads: Heads,
    no_mask_prompt: bool,
    output_dir: &Path,
) -> anyhow::Result<()> {
    let (params, adapted, meta) = load(checkpoint)?;
    let choice: HeadChoice = heads.into();
    let source = match (choice, &adapted) {
        (HeadChoice::Shared, _) => soft_forge::model::HeadSource::Shared,
        (HeadChoice::Adapted, Some(h)) => soft_forge::model::HeadSource::Adapted(h),
        (HeadChoice::Adapted, None) => bail!(Error::Config("checkpoint has no adapted heads".into())),
    };
    let examples = tokenize_records(&load_instruction_dataset(data)?, !no_mask_prompt);
    if examples.is_empty() {
        bail!(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let set = soft_forge::data::build_batches(
        &examples,
        params.config.max_seq_len,
        EVAL_BATCH_SIZE,
        soft_forge::data::EOS_ID,
        !no_mask_prompt,
    )?;
    let sums = exit_nll(&params, source, &set.batches, meta.exits.depths())?;
    let mut rows = Vec::new();
    let mut csv = String::from("exit,loss,perplexity,tokens\n");
    for (exit, (nll, n)) in sums {
        if n == 0 {
            bail!(Error::EmptyLoss);
        }
        let loss = nll / n as f64;
        csv.push_str(&format!("{exit},{loss},{},{n}\n", loss.exp()));
        println!("exit {exit}: loss {loss:.4} ppl {:.3}", loss.exp());
        rows.push(EvalRow {
            exit,
            loss,
            perplexity: loss.exp(),
            tokens: n,
        });
    }
    ensure_dir(output_dir)?;
    fs::write(output_dir.join("eval.csv"), csv)?;
    write_json(
        &output_dir.join("eval.json"),
        &EvalReport {
            schema_version: 1,
            checkpoint: checkpoint.display().to_string(),
            heads: choice,
            rows,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    checkpoint: &Path,
    prompts: &Path,
    metric: MetricArg,
    self_reference: bool,
    reference: Option<PathBuf>,
    reference_exit: Option<usize>,
    positions: usize,
    reverse_kl: bool,
    post_norm: bool,
    output_dir: &Path,
) -> anyhow::Result<()> {
    if !self_reference && reference.is_none() {
        bail!(Error::Config(
            "pass --self-reference or --reference <checkpoint>".into()
        ));
    }
    let (params, heads, meta) = load(checkpoint)?;
    let other = reference.as_deref().map(load).transpose()?;
    let records = load_prompts(prompts)?;
    let tag = checkpoint.display().to_string();
    let model = ModelRef {
        tag: &tag,
        params: &params,
        exits: &meta.exits,
        heads: heads.as_ref(),
    };
    let ref_tag = reference
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| tag.clone());
    let ref_model = match &other {
        Some((p, h, m)) => ModelRef {
            tag: &ref_tag,
            params: p,
            exits: &m.exits,
            heads: h.as_ref(),
        },
        None => model,
    };
    let ref_exit = reference_exit.unwrap_or(ref_model.exits.max());
    let opts = AnalysisOptions {
        positions,
        metric: match metric {
            MetricArg::Kl => Metric::KlNats,
            MetricArg::Cosine => Metric::Cosine,
        },
        kl_direction: if reverse_kl {
            KlDirection::ReferenceToExit
        } else {
            KlDirection::ExitToReference
        },
        hidden_state: if post_norm {
            HiddenState::PostNorm
        } else {
            HiddenState::PreNorm
        },
    };
    let matrix = positional_matrix(model, meta.exits.depths(), (ref_model, ref_exit), &records, &opts)?;
    ensure_dir(output_dir)?;
    let stem = match metric {
        MetricArg::Kl => "positional_kl",
        MetricArg::Cosine => "positional_cosine",
    };
    fs::write(output_dir.join(format!("{stem}.csv")), matrix.to_csv())?;
    #[derive(Serialize)]
    struct Report<'a> {
        schema_version: u32,
        #[serde(flatten)]
        matrix: &'a soft_forge::analysis::PositionalMatrix,
    }
    write_json(
        &output_dir.join(format!("{stem}.json")),
        &Report {
            schema_version: 1,
            matrix: &matrix,
        },
    )?;
    for (d, m) in matrix.row_exits.iter().zip(matrix.row_means()) {
        println!("exit {d}: mean {m:.6}");
    }
    Ok(())
}

fn write_matrix(output_dir: &Path, matrix: &TournamentMatrix) -> anyhow::Result<()> {
    ensure_dir(output_dir)?;
    fs::write(output_dir.join("tournament_scores.csv"), matrix.scores_csv())?;
    fs::write(output_dir.join("tournament_tallies.csv"), matrix.tallies_csv())?;
    write_json(&output_dir.join("tournament.json"), matrix)?;
    print!("{}", matrix.scores_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_tournament(
    ingest: Option<PathBuf>,
    checkpoints: &[PathBuf],
    instructions: Option<PathBuf>,
    judge: JudgeArg,
    scorer: Option<PathBuf>,
    max_new: usize,
    judge_config: Option<PathBuf>,
    output_dir: &Path,
) -> anyhow::Result<()> {
    if let Some(path) = ingest {
        let text =
            fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        return write_matrix(output_dir, &ingest_tallies(&text)?);
    }
    if checkpoints.is_empty() {
        bail!(Error::Config("pass --ingest or at least one --checkpoint".into()));
    }
    let instructions = instructions.ok_or_else(|| Error::Config("--instructions is required".into()))?;
    let jcfg: JudgeConfig = match judge_config {
        Some(p) => {
            let text =
                fs::read_to_string(&p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => JudgeConfig::default(),
    };
    let kind = match judge {
        JudgeArg::Overlap => JudgeKind::Overlap,
        JudgeArg::Loglik => JudgeKind::Loglik,
    };
    let scorer_params = scorer.as_deref().map(load).transpose()?.map(|(p, _, _)| p);
    let judge = builtin_judge(kind, scorer_params, &jcfg)?;
    let records = load_prompts(&instructions)?;
    let models: Vec<(String, Loaded)> = checkpoints
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((format!("m{i}"), load(p)?)))
        .collect::<anyhow::Result<_>>()?;
    let mut contestants = Vec::new();
    for (tag, (params, heads, meta)) in &models {
        for &exit in meta.exits.depths() {
            contestants.push(Contestant {
                model: tag,
                params,
                exits: &meta.exits,
                heads: heads.as_ref(),
                head_choice: if heads.is_some() {
                    HeadChoice::Adapted
                } else {
                    HeadChoice::Shared
                },
                exit,
            });
        }
    }
    let matrix = run_tournament(
        &contestants,
        &contestants,
        &records,
        judge.as_ref(),
        &GenerationSettings {
            max_new_tokens: max_new,
        },
    )?;
    write_matrix(output_dir, &matrix)
}

fn cmd_gradcheck(seed: u64, output_dir: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let report = gradient_check(&GradCheckConfig {
        seed,
        ..Default::default()
    })?;
    println!(
        "max relative error {:.3e} at {}[{}] over {} coordinates: {}",
        report.max_rel_error,
        report.worst_parameter,
        report.worst_index,
        report.coordinates_checked,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = output_dir {
        ensure_dir(&dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            mode,
            steps,
            seed,
            output_dir,
        } => cmd_train(&config, mode, steps, seed, output_dir)?,
        Command::AdaptHeads {
            config,
            checkpoint,
            steps,
            output_dir,
        } => cmd_adapt(&config, &checkpoint, steps, output_dir)?,
        Command::Generate {
            checkpoint,
            exit,
            prompt_file,
            max_new,
            heads,
            output,
        } => cmd_generate(&checkpoint, exit, &prompt_file, max_new, heads, output)?,
        Command::Eval {
            checkpoint,
            data,
            heads,
            no_mask_prompt,
            output_dir,
        } => cmd_eval(&checkpoint, &data, heads, no_mask_prompt, &output_dir)?,
        Command::Analyze {
            checkpoint,
            prompts,
            metric,
            self_reference,
            reference,
            reference_exit,
            positions,
            reverse_kl,
            post_norm,
            output_dir,
        } => cmd_analyze(
            &checkpoint,
            &prompts,
            metric,
            self_reference,
            reference,
            reference_exit,
            positions,
            reverse_kl,
            post_norm,
            &output_dir,
        )?,
        Command::Tournament {
            ingest,
            checkpoint,
            instructions,
            judge,
            scorer,
            max_new,
            judge_config,
            output_dir,
        } => cmd_tournament(
            ingest,
            &checkpoint,
            instructions,
            judge,
            scorer,
            max_new,
            judge_config,
            &output_dir,
        )?,
        Command::Gradcheck { seed, output_dir } => return cmd_gradcheck(seed, output_dir),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = threads_from_env().and_then(|n| par::with_threads(n, || run(cli)));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
