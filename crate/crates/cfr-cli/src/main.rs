//! `cfr` command line: synthetic data generation, training, evaluation,
//! ablation, gradient checking, and explanation export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cfr_core::data::{
    gen_synthetic, load_dataset, save_dataset, AnswerTarget, SampleBundle, SynthConfig,
};
use cfr_core::fusion::SoftmaxAxis;
use cfr_core::gradcheck::grad_check;
use cfr_core::head::predict;
use cfr_core::model::{
    forward, init_params, load_checkpoint, save_checkpoint, AblationMode, CfrConfig, TextContext,
};
use cfr_core::text::{build_filter, load_embeddings, load_stop_words};
use cfr_core::train::{batch_loss_and_grads, evaluate, history_csv, train_loop, TrainConfig};
use cfr_core::CfrError;

#[derive(Parser)]
#[command(name = "cfr", about = "Coarse-to-fine reasoning engine for VQA", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic compositional dataset under --out
    GenSynth(GenSynthArgs),
    /// Train a model and write the best checkpoint plus history CSV
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints a JSON metrics report
    Eval(EvalArgs),
    /// Train and evaluate coarse-only / fine-only / full variants
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Export the interpretability record for one sample as JSON
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 12)]
    objects: usize,
    #[arg(long, default_value_t = 6)]
    attrs: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long = "ghost-rate", default_value_t = 0.5)]
    ghost_rate: f64,
    #[arg(long = "train-n", default_value_t = 2000)]
    train_n: usize,
    #[arg(long = "val-n", default_value_t = 500)]
    val_n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long = "emb-dim", default_value_t = 32)]
    emb_dim: usize,
    #[arg(long = "scene-min", default_value_t = 2)]
    scene_min: usize,
    #[arg(long = "scene-max", default_value_t = 3)]
    scene_max: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Directory produced by gen-synth
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Joint representation dimension (also d_q and d_psi)
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long = "softmax-axis", value_enum, default_value_t = AxisArg::Flat)]
    softmax_axis: AxisArg,
    #[arg(long = "channel-scale", default_value_t = false)]
    channel_scale: bool,
    #[arg(long = "min-freq", default_value_t = 10)]
    min_freq: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long = "min-freq", default_value_t = 10)]
    min_freq: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// retrain: train each variant from scratch; force: train once and
    /// force the adaptive weights at evaluation
    #[arg(long, value_enum, default_value_t = AblateStrategy::Retrain)]
    mode: AblateStrategy,
    #[arg(long = "min-freq", default_value_t = 10)]
    min_freq: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Sample id to explain
    #[arg(long)]
    id: String,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long = "min-freq", default_value_t = 10)]
    min_freq: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    CoarseOnly,
    FineOnly,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => AblationMode::Full,
            ModeArg::CoarseOnly => AblationMode::CoarseOnly,
            ModeArg::FineOnly => AblationMode::FineOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Flat,
    Rows,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateStrategy {
    Retrain,
    Force,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CfrError::Argument(_) => EXIT_USAGE,
                CfrError::Numeric(_) => EXIT_CHECK,
                _ => EXIT_DATA,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CfrError> {
    match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Explain(a) => cmd_explain(a),
    }
}

// ---------------------------------------------------------------------------
// dataset directory layout written by gen-synth
// ---------------------------------------------------------------------------

struct DataDir {
    train: Vec<SampleBundle>,
    val: Vec<SampleBundle>,
    answers: Vec<String>,
    ctx: TextContext,
}

fn load_data_dir(dir: &Path, min_freq: usize) -> Result<DataDir, CfrError> {
    let train = load_dataset(&dir.join("train.jsonl"))?;
    let val = load_dataset(&dir.join("val.jsonl"))?;
    let (mut vocab, table) = load_embeddings(&dir.join("embeddings.txt"))?;
    let stop_words = load_stop_words(&dir.join("stopwords.txt"))?;
    let answers: Vec<String> = std::fs::read_to_string(dir.join("answers.txt"))?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    for s in &train {
        for t in &s.question_tokens {
            vocab.count_word(t);
        }
    }
    let question_filter = build_filter(&stop_words, &vocab, min_freq);
    Ok(DataDir { train, val, answers, ctx: TextContext { vocab, table, question_filter } })
}

fn model_config(data: &DataDir, dim: usize, axis: AxisArg, scale: bool, seed: u64) -> CfrConfig {
    let d_i = data
        .train
        .first()
        .or(data.val.first())
        .map(|s| s.image_features.cols())
        .unwrap_or(1);
    let mut config =
        CfrConfig::desk(data.ctx.table.dim(), d_i, data.answers.len()).with_joint_dim(dim);
    config.softmax_axis = match axis {
        AxisArg::Flat => SoftmaxAxis::Flat,
        AxisArg::Rows => SoftmaxAxis::Rows,
    };
    config.learnable_channel_scale = scale;
    config.seed = seed;
    config
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<ExitCode, CfrError> {
    let cfg = SynthConfig {
        objects: a.objects,
        attrs: a.attrs,
        emb_dim: a.emb_dim,
        scene_min: a.scene_min,
        scene_max: a.scene_max,
        noise: a.noise,
        dropout: a.dropout,
        ghost_rate: a.ghost_rate,
        train_n: a.train_n,
        val_n: a.val_n,
        seed: a.seed,
    };
    let data = gen_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    save_dataset(&data.train, &a.out.join("train.jsonl"))?;
    save_dataset(&data.val, &a.out.join("val.jsonl"))?;

    let mut emb = String::new();
    for idx in 1..data.vocab.len() {
        let word = data.vocab.word_at(idx).unwrap();
        emb.push_str(word);
        for v in data.table.vector(idx) {
            emb.push(' ');
            emb.push_str(&format!("{v}"));
        }
        emb.push('\n');
    }
    std::fs::write(a.out.join("embeddings.txt"), emb)?;

    let mut answers = data.answer_vocab.join("\n");
    answers.push('\n');
    std::fs::write(a.out.join("answers.txt"), answers)?;

    let mut stops: Vec<&String> = data.stop_words.iter().collect();
    stops.sort();
    let mut stop_text =
        stops.into_iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n");
    stop_text.push('\n');
    std::fs::write(a.out.join("stopwords.txt"), stop_text)?;

    eprintln!(
        "wrote {} train / {} val samples to {}",
        data.train.len(),
        data.val.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode, CfrError> {
    let data = load_data_dir(&a.data, a.min_freq)?;
    let config = model_config(&data, a.dim, a.softmax_axis, a.channel_scale, a.seed);
    let tcfg = TrainConfig {
        batch_size: a.batch,
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (params, history) =
        train_loop(&data.train, &data.val, &data.ctx, &config, &tcfg, a.mode.into())?;
    save_checkpoint(&params, &config, &a.out)?;
    if let Some(hpath) = &a.history {
        std::fs::write(hpath, history_csv(&history))?;
    }
    if let Some(last) = history.last() {
        eprintln!(
            "trained {} epochs, final loss {:.4}, best val acc {:.4}",
            history.len(),
            last.loss,
            history.iter().map(|h| h.val_acc).fold(f64::NEG_INFINITY, f64::max)
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, CfrError> {
    let data = load_data_dir(&a.data, a.min_freq)?;
    let (params, config) = load_checkpoint(&a.ckpt)?;
    let samples = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    let acc = evaluate(samples, &params, &data.ctx, &config, a.mode.into())?;
    let is_mc = samples.iter().any(|s| matches!(s.target, AnswerTarget::Mc { .. }));
    let report = if is_mc {
        json!({ "acc_mc": acc, "n": samples.len() })
    } else {
        json!({ "acc": acc, "n": samples.len() })
    };
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode, CfrError> {
    let data = load_data_dir(&a.data, a.min_freq)?;
    let config = model_config(&data, a.dim, AxisArg::Flat, false, a.seed);
    let tcfg = TrainConfig {
        batch_size: a.batch,
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let modes =
        [AblationMode::CoarseOnly, AblationMode::FineOnly, AblationMode::Full];

    let mut rows = Vec::new();
    match a.mode {
        AblateStrategy::Retrain => {
            for mode in modes {
                let (params, _) =
                    train_loop(&data.train, &data.val, &data.ctx, &config, &tcfg, mode)?;
                let acc = evaluate(&data.val, &params, &data.ctx, &config, mode)?;
                rows.push((mode, acc));
            }
        }
        AblateStrategy::Force => {
            let (params, _) = train_loop(
                &data.train,
                &data.val,
                &data.ctx,
                &config,
                &tcfg,
                AblationMode::Full,
            )?;
            for mode in modes {
                let acc = evaluate(&data.val, &params, &data.ctx, &config, mode)?;
                rows.push((mode, acc));
            }
        }
    }

    let report: Vec<_> = rows
        .iter()
        .map(|(mode, acc)| {
            let name = match mode {
                AblationMode::CoarseOnly => "coarse_only",
                AblationMode::FineOnly => "fine_only",
                AblationMode::Full => "full",
            };
            json!({ "mode": name, "acc": acc })
        })
        .collect();
    println!("{}", serde_json::Value::Array(report));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode, CfrError> {
    let mut all_pass = true;
    for run in 0..a.seeds.max(1) {
        let seed = a.seed + run as u64;
        let scfg = SynthConfig {
            objects: 5,
            attrs: 3,
            emb_dim: 5,
            scene_min: 2,
            scene_max: 3,
            noise: 0.2,
            dropout: 0.0,
            ghost_rate: 0.5,
            train_n: a.samples.max(1),
            val_n: 0,
            seed,
        };
        let synth = gen_synthetic(&scfg)?;
        let mut config = CfrConfig::desk(scfg.emb_dim, scfg.feature_dim(), scfg.attrs)
            .with_joint_dim(4);
        config.seed = seed;
        let ctx = TextContext {
            question_filter: build_filter(&synth.stop_words, &synth.vocab, 0),
            vocab: synth.vocab,
            table: synth.table,
        };
        let params = init_params(&config, seed.wrapping_add(17));
        let (_, analytic) =
            batch_loss_and_grads(&synth.train, &params, &ctx, &config, AblationMode::Full)?;
        let report = grad_check(
            |p| {
                batch_loss_and_grads(&synth.train, p, &ctx, &config, AblationMode::Full)
                    .map(|(loss, _)| loss)
            },
            &params,
            &analytic,
            a.eps,
            a.tol,
        )?;
        for check in &report.per_param {
            println!(
                "seed {} {} rel_err {:.3e} {}",
                seed,
                check.name,
                check.max_rel_error,
                if check.max_rel_error <= a.tol { "ok" } else { "FAIL" }
            );
        }
        all_pass &= report.pass;
    }
    if all_pass {
        println!("gradcheck PASS (eps {:.1e}, tol {:.1e})", a.eps, a.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAIL (eps {:.1e}, tol {:.1e})", a.eps, a.tol);
        Ok(ExitCode::from(EXIT_CHECK))
    }
}

fn cmd_explain(a: ExplainArgs) -> Result<ExitCode, CfrError> {
    let data = load_data_dir(&a.data, a.min_freq)?;
    let (params, config) = load_checkpoint(&a.ckpt)?;
    let samples = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    let sample = samples
        .iter()
        .find(|s| s.id == a.id)
        .ok_or_else(|| CfrError::argument(format!("unknown sample id '{}'", a.id)))?;

    let (rho, expl) = forward(sample, &params, &data.ctx, &config, AblationMode::Full)?;
    debug_assert_eq!(expl.top_k[0].answer, predict(&rho).unwrap());

    let answer_name = |idx: usize| -> String {
        data.answers.get(idx).cloned().unwrap_or_else(|| idx.to_string())
    };
    let adaptive: serde_json::Map<String, serde_json::Value> = expl
        .adaptive
        .iter()
        .map(|s| {
            (answer_name(s.answer), json!({ "w_cg": s.w_cg, "w_fg": s.w_fg }))
        })
        .collect();
    let report = json!({
        "id": sample.id,
        "top_k": expl.top_k.iter().map(|t| json!({
            "answer": answer_name(t.answer),
            "answer_index": t.answer,
            "confidence": t.confidence,
        })).collect::<Vec<_>>(),
        "psi_hat_image": expl.psi_hat_image,
        "psi_hat_question": expl.psi_hat_question,
        "A_cg": expl.a_cg,
        "A_fg": expl.a_fg,
        "adaptive": adaptive,
    });
    println!("{report}");

    if let Some(csv_path) = &a.csv {
        let mut csv = String::from("series,index,value\n");
        for (i, v) in expl.psi_hat_image.iter().enumerate() {
            csv.push_str(&format!("psi_hat_image,{i},{v}\n"));
        }
        for (i, v) in expl.psi_hat_question.iter().enumerate() {
            csv.push_str(&format!("psi_hat_question,{i},{v}\n"));
        }
        for t in &expl.top_k {
            csv.push_str(&format!("top_k,{},{}\n", t.answer, t.confidence));
        }
        std::fs::write(csv_path, csv)?;
    }
    Ok(ExitCode::SUCCESS)
}
