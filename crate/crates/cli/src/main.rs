use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use embedit::bias::{edit_balance, BalanceMode, BalancerParams, BiasEditRequest};
use embedit::editor::{
    edit_multi_encoder, edit_sequential, edit_single, param_budget_report, revert, EditBudget,
    EditHyperparams, EditLedger, EditRequest, EditResult, LossPositions,
};
use embedit::eval::{
    aggregate, evaluate_edit, female_percentage, filter_sequential_dataset, gender_delta,
    load_edit_entries, EditEntry, GenderEntry,
};
use embedit::optim::OptimizerKind;
use embedit::probe::{accuracy_over_seeds, LogRegParams, ProbeDataset};
use embedit::{fixtures, EmbeditError, Encoder, EncoderConfig, Result, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "embedit", version, about = "Edit CLIP-style text encoders through their token embeddings only")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized weight archive.
    Init {
        /// Encoder config JSON; defaults to the tiny 8-wide encoder.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary JSON; defaults to the built-in fixture vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output archive path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit one word so the source prompt encodes like the destination.
    Edit {
        #[command(flatten)]
        io: EditIo,
        #[arg(long)]
        source: String,
        #[arg(long)]
        destination: String,
        #[arg(long)]
        target: String,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Apply every entry of an edit dataset to one encoder, in order.
    SeqEdit {
        #[arg(long)]
        weights: PathBuf,
        /// JSON-lines edit dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// Target words to leave out of the run.
        #[arg(long)]
        exclude: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Balance professions between gendered prompts.
    Gender {
        #[arg(long)]
        weights: PathBuf,
        /// JSON-lines gender dataset.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = ["auto", "manual"], default_value = "auto")]
        mode: String,
        /// Stopping ratio for manual mode, unless an entry sets its own.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        optimizer: Option<OptimizerKind>,
        #[arg(long)]
        loss_positions: Option<LossPositions>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Undo the most recent ledger entries.
    Revert {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        /// Number of entries to undo; defaults to all of them.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train logistic-regression probes on embedding rows.
    Probe {
        #[arg(long)]
        weights: PathBuf,
        /// Probe dataset JSON.
        #[arg(long)]
        dataset: PathBuf,
        /// First split seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive split seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an edited encoder against a frozen reference.
    Eval {
        /// Edited archive.
        #[arg(long)]
        weights: PathBuf,
        /// Unedited reference archive.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP accounting for a ledger.
    Report {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        /// Second encoder of a dual-encoder edit.
        #[arg(long, requires = "ledger2")]
        weights2: Option<PathBuf>,
        #[arg(long, requires = "weights2")]
        ledger2: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EditIo {
    #[arg(long)]
    weights: PathBuf,
    /// Second encoder, edited with the same request.
    #[arg(long)]
    weights2: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    loss_positions: Option<LossPositions>,
}

impl HyperArgs {
    fn resolve(&self) -> Result<EditHyperparams> {
        let d = EditHyperparams::default();
        let hyper = EditHyperparams {
            lambda: self.lambda.unwrap_or(d.lambda),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            loss_positions: self.loss_positions.unwrap_or(d.loss_positions),
        };
        hyper.validate()?;
        Ok(hyper)
    }
}

/// One line of a gender dataset: the evaluation entry plus the prompts the
/// balancer edits between.
#[derive(Debug, Deserialize)]
struct GenderJob {
    #[serde(flatten)]
    entry: GenderEntry,
    stereotypical_prompt: String,
    counter_prompt: String,
    #[serde(default)]
    lambda: Option<f64>,
}

#[derive(Serialize)]
struct GenderRecord {
    profession: String,
    f_before: f64,
    f_after: f64,
    delta: Option<f64>,
    alpha: Option<f64>,
    result: EditResult,
}

#[derive(Serialize)]
struct GenderReport {
    delta_before: f64,
    delta_after: f64,
    professions: Vec<GenderRecord>,
}

#[derive(Serialize)]
struct ProbeReport {
    n_items: usize,
    seeds: Vec<u64>,
    mean_accuracy: f64,
    std_accuracy: f64,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_init(config: Option<&Path>, vocab: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let config: EncoderConfig = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| EmbeditError::Config(format!("{}: {e}", p.display())))?,
        None => EncoderConfig::tiny(0),
    };
    let vocab = match vocab {
        Some(p) => Vocab::load_json(p)?,
        None => fixtures::fixture_vocab(),
    };
    let encoder = Encoder::random(config, vocab, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    encoder.save(out)?;
    println!(
        "wrote {} (d_model={} layers={} vocab={} params={})",
        out.display(),
        encoder.config.d_model,
        encoder.config.n_layers,
        encoder.config.vocab_size,
        encoder.config.param_count()
    );
    Ok(())
}

fn summarize(label: &str, r: &EditResult) {
    println!(
        "{label}: loss {:.6e} -> {:.6e} (tau {:.6e}) after {} steps, {}",
        r.initial_loss,
        r.final_loss,
        r.threshold_tau,
        r.optimizer_steps,
        if r.converged { "converged" } else { "not converged" }
    );
}

fn cmd_edit(io: &EditIo, request: EditRequest, hyper: EditHyperparams) -> Result<()> {
    create_dir(&io.out)?;
    let mut encoders = vec![Encoder::load(&io.weights)?];
    if let Some(w2) = &io.weights2 {
        encoders.push(Encoder::load(w2)?);
    }
    let mut ledgers = vec![EditLedger::new(); encoders.len()];
    let results = if encoders.len() == 1 {
        vec![edit_single(&mut encoders[0], &request, &hyper, &mut ledgers[0])?]
    } else {
        edit_multi_encoder(&mut encoders, &mut ledgers, &request, &hyper)?
    };
    let names = [("weights.emb", "ledger.json"), ("weights2.emb", "ledger2.json")];
    for ((encoder, ledger), (w, l)) in encoders.iter().zip(&ledgers).zip(names) {
        encoder.save(io.out.join(w))?;
        ledger.save(io.out.join(l))?;
    }
    write_json(&io.out.join("result.json"), &results)?;
    for (i, r) in results.iter().enumerate() {
        summarize(&format!("encoder {} {:?}", i + 1, request.target_word), r);
    }
    Ok(())
}

fn cmd_seq_edit(weights: &Path, dataset: &Path, exclude: &[String], out: &Path, hyper: EditHyperparams) -> Result<()> {
    create_dir(out)?;
    let entries = filter_sequential_dataset(&load_edit_entries(dataset)?, exclude);
    for e in &entries {
        e.validate()?;
    }
    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    std::fs::write(out.join("dataset.jsonl"), text)?;

    let mut encoder = Encoder::load(weights)?;
    let requests: Vec<EditRequest> = entries
        .iter()
        .map(|e| EditRequest::new(&e.source, &e.destination, &e.target_word))
        .collect();
    let mut ledger = EditLedger::new();
    let outcome = edit_sequential(&mut encoder, &requests, &hyper, &mut ledger);
    // Completed edits are kept on disk even when a later one fails.
    encoder.save(out.join("weights.emb"))?;
    ledger.save(out.join("ledger.json"))?;
    let results = outcome?;
    write_json(&out.join("result.json"), &results)?;
    let converged = results.iter().filter(|r| r.converged).count();
    println!("{} edits applied, {converged} converged", results.len());
    Ok(())
}

fn cmd_gender(
    weights: &Path,
    dataset: &Path,
    mode: BalanceMode,
    lambda: Option<f64>,
    params: BalancerParams,
    out: &Path,
) -> Result<()> {
    create_dir(out)?;
    let text = std::fs::read_to_string(dataset)?;
    let jobs: Vec<GenderJob> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EmbeditError::Dataset(format!("{}:{}: {e}", dataset.display(), i + 1)))
        })
        .collect::<Result<_>>()?;
    let reference = Encoder::load(weights)?;
    let mut encoder = reference.clone();
    let mut ledger = EditLedger::new();
    let mut records = Vec::with_capacity(jobs.len());
    for job in &jobs {
        job.entry.validate()?;
        let f_before = female_percentage(&job.entry, &reference, &reference, 1)?;
        let request = BiasEditRequest {
            profession: job.entry.profession.clone(),
            stereotypical_prompt: job.stereotypical_prompt.clone(),
            counter_prompt: job.counter_prompt.clone(),
            mode,
            lambda_manual: job.lambda.or(lambda),
        };
        let outcome = edit_balance(&mut encoder, &request, &params, &mut ledger)?;
        let f_after = female_percentage(&job.entry, &encoder, &reference, 1)?;
        println!("{}: F {f_before:.1}% -> {f_after:.1}%", job.entry.profession);
        records.push(GenderRecord {
            profession: job.entry.profession.clone(),
            f_before,
            f_after,
            delta: outcome.delta,
            alpha: outcome.alpha,
            result: outcome.result,
        });
    }
    let before: Vec<f64> = records.iter().map(|r| r.f_before).collect();
    let after: Vec<f64> = records.iter().map(|r| r.f_after).collect();
    let report = GenderReport {
        delta_before: gender_delta(&before)?,
        delta_after: gender_delta(&after)?,
        professions: records,
    };
    encoder.save(out.join("weights.emb"))?;
    ledger.save(out.join("ledger.json"))?;
    write_json(&out.join("gender.json"), &report)?;
    println!("delta {:.4} -> {:.4}", report.delta_before, report.delta_after);
    Ok(())
}

fn cmd_revert(weights: &Path, ledger_path: &Path, n: Option<usize>, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut encoder = Encoder::load(weights)?;
    let mut ledger = EditLedger::load(ledger_path)?;
    let n = n.unwrap_or(ledger.len());
    revert(&mut encoder.weights, &mut ledger, n)?;
    encoder.save(out.join("weights.emb"))?;
    ledger.save(out.join("ledger.json"))?;
    println!("reverted {n} edits, {} remain", ledger.len());
    Ok(())
}

fn cmd_probe(weights: &Path, dataset: &Path, seeds: Vec<u64>, params: LogRegParams, out: &Path) -> Result<()> {
    create_dir(out)?;
    let encoder = Encoder::load(weights)?;
    let data = ProbeDataset::load(dataset)?;
    let (mean, std) = accuracy_over_seeds(&data, &encoder.weights, &encoder.vocab, &seeds, &params)?;
    let report = ProbeReport {
        n_items: data.items.len(),
        seeds,
        mean_accuracy: mean,
        std_accuracy: std,
    };
    write_json(&out.join("probe.json"), &report)?;
    println!(
        "{} vs {}: accuracy {:.2}% ± {:.2}",
        data.label_names[0],
        data.label_names[1],
        100.0 * mean,
        100.0 * std
    );
    Ok(())
}

fn cmd_eval(weights: &Path, reference: &Path, dataset: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let edited = Encoder::load(weights)?;
    let reference = Encoder::load(reference)?;
    let entries: Vec<EditEntry> = load_edit_entries(dataset)?;
    let per_entry = entries
        .iter()
        .map(|e| evaluate_edit(e, &edited, &reference))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(per_entry);
    write_json(&out.join("eval.json"), &report)?;
    print!("{}", report.text_table());
    Ok(())
}

fn cmd_report(
    weights: &Path,
    ledger: &Path,
    second: Option<(&Path, &Path)>,
    out: Option<&Path>,
) -> Result<()> {
    let mut pairs = vec![(weights, ledger)];
    pairs.extend(second);
    let mut reports = Vec::new();
    for (w, l) in pairs {
        let encoder = Encoder::load(w)?;
        let ledger = EditLedger::load(l)?;
        reports.push(param_budget_report(&ledger, encoder.config.param_count(), encoder.config.d_model));
    }
    for r in &reports {
        for b in &r.per_edit {
            println!("{}", b.summary_line());
        }
    }
    if reports.len() == 2 {
        let n = reports[0].per_edit.len().min(reports[1].per_edit.len());
        let total = reports[0].total_model_params + reports[1].total_model_params;
        for i in 0..n {
            let combined = EditBudget::combine(&[reports[0].per_edit[i].clone(), reports[1].per_edit[i].clone()], total);
            println!("combined {}", combined.summary_line());
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("budget.json"), &reports)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { config, vocab, seed, out } => cmd_init(config.as_deref(), vocab.as_deref(), seed, &out),
        Command::Edit {
            io,
            source,
            destination,
            target,
            hyper,
        } => cmd_edit(&io, EditRequest::new(&source, &destination, &target), hyper.resolve()?),
        Command::SeqEdit {
            weights,
            dataset,
            exclude,
            out,
            hyper,
        } => cmd_seq_edit(&weights, &dataset, &exclude, &out, hyper.resolve()?),
        Command::Gender {
            weights,
            dataset,
            mode,
            lambda,
            max_iters,
            lr,
            optimizer,
            loss_positions,
            out,
        } => {
            let d = BalancerParams::default();
            let params = BalancerParams {
                max_iters: max_iters.unwrap_or(d.max_iters),
                learning_rate: lr.unwrap_or(d.learning_rate),
                optimizer: optimizer.unwrap_or(d.optimizer),
                loss_positions: loss_positions.unwrap_or(d.loss_positions),
                ..d
            };
            let mode = if mode == "manual" { BalanceMode::Manual } else { BalanceMode::Auto };
            cmd_gender(&weights, &dataset, mode, lambda, params, &out)
        }
        Command::Revert { weights, ledger, n, out } => cmd_revert(&weights, &ledger, n, &out),
        Command::Probe {
            weights,
            dataset,
            seed,
            seeds,
            lr,
            epochs,
            out,
        } => {
            let d = LogRegParams::default();
            let params = LogRegParams {
                learning_rate: lr.unwrap_or(d.learning_rate),
                epochs: epochs.unwrap_or(d.epochs),
                ..d
            };
            cmd_probe(&weights, &dataset, (seed..seed + seeds).collect(), params, &out)
        }
        Command::Eval {
            weights,
            reference,
            dataset,
            out,
        } => cmd_eval(&weights, &reference, &dataset, &out),
        Command::Report {
            weights,
            ledger,
            weights2,
            ledger2,
            out,
        } => {
            let second = weights2.as_deref().zip(ledger2.as_deref());
            cmd_report(&weights, &ledger, second, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
