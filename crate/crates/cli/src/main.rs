use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dta_core::config::RunConfig;
use dta_core::data::{synth_generate, write_block, PointCloudBlock};
use dta_core::gradcheck::{run_suite, GradFault, GradcheckOptions};
use dta_core::pipeline::{
    ablation_row, csv_preamble, eval_report, eval_synth_options, load_corpus, log_row, parse_variants, run_ablation, train, viz_dump,
    Checkpoint, Corpus, ABLATION_HEADER, LOG_HEADER,
};
use dta_core::Error;

#[derive(Parser)]
#[command(name = "dtaformer", version, about = "Point-cloud segmentation with dynamic token aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a per-epoch log.
    Train(Common),
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `eval` or `train`.
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Train the baseline and each variant, then write a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `switch=value` list, or `all`.
        #[arg(long, default_value = "all")]
        variants: String,
    },
    /// Finite-difference gradient checks on toy-sized blocks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Corrupt the row-Hadamard gradient to prove the checks bite.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Dump selection, map and prediction tables for one block.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block index within the split.
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long, default_value_t = 0)]
        query_index: usize,
        /// Stage whose map row is dumped (1-based).
        #[arg(long, default_value_t = 1)]
        stage: usize,
    },
    /// Write a synthetic corpus as block files under `<out>/train` and `<out>/eval`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::NonFiniteLoss { .. }) => 3,
            _ => 2,
        };
        Failure { code, err }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => cmd_eval(&common, &checkpoint, &split),
        Command::Ablate { common, variants } => cmd_ablate(&common, &variants),
        Command::Gradcheck {
            seed,
            out,
            tolerance,
            inject_fault,
        } => cmd_gradcheck(seed, out.as_deref(), tolerance, inject_fault),
        Command::Viz {
            common,
            checkpoint,
            block,
            split,
            query_index,
            stage,
        } => cmd_viz(&common, &checkpoint, block, &split, query_index, stage),
        Command::Synth { common } => cmd_synth(&common),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::parse_text("", "<defaults>")?,
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn cmd_train(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    let corpus = load_corpus(&cfg)?;
    let out = out_dir(c)?;
    let echo = cfg.echo();
    let mut log = csv_preamble(cfg.seed, &echo);
    log.push_str(LOG_HEADER);
    log.push('\n');
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, &log).context("writing log")?;
    let outcome = train(&cfg, &corpus, &mut |row, ckpt| {
        log.push_str(&log_row(row));
        log.push('\n');
        fs::write(&log_path, &log)?;
        if let Some(ck) = ckpt {
            ck.save(&out.join(format!("checkpoint_epoch{:04}.json", ck.epoch)))?;
            ck.save(&out.join("checkpoint.json"))?;
        }
        eprintln!("epoch {} loss {:.6}", row.epoch, row.train_loss);
        Ok(())
    });
    if let Err(e @ Error::NonFiniteLoss { .. }) = &outcome {
        eprintln!("numerical failure: {e}");
    }
    outcome?;
    Ok(())
}

fn split_blocks<'a>(
    corpus: &'a Corpus,
    split: &str,
) -> anyhow::Result<&'a [PointCloudBlock]> {
    match split {
        "eval" => Ok(&corpus.eval),
        "train" => Ok(&corpus.train),
        _ => Err(anyhow!("split must be `eval` or `train`, got `{split}`")),
    }
}

fn load_matching(cfg: &RunConfig, path: &Path) -> anyhow::Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.model_config != cfg.model {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different model configuration",
            path.display()
        ))
        .into());
    }
    Ok(ck)
}

fn cmd_eval(c: &Common, checkpoint: &Path, split: &str) -> CmdResult {
    let cfg = load_config(c)?;
    let ck = load_matching(&cfg, checkpoint)?;
    let corpus = load_corpus(&cfg)?;
    let blocks = split_blocks(&corpus, split)?;
    let report = eval_report(&ck.model(), blocks, &corpus.spec, cfg.echo(), cfg.seed, cfg.latency_repeats)?;
    let out = out_dir(c)?;
    fs::write(out.join("report.json"), report.to_json()?).context("writing report")?;
    println!("oa {:.4} miou {:.4} avg_f1 {:.4}", report.oa, report.miou, report.avg_f1);
    Ok(())
}

fn cmd_ablate(c: &Common, variants: &str) -> CmdResult {
    let variants = parse_variants(variants)?;
    let cfg = load_config(c)?;
    let corpus = load_corpus(&cfg)?;
    let out = out_dir(c)?;
    let rows = run_ablation(&cfg, &corpus, &variants)?;
    let mut csv = csv_preamble(cfg.seed, &cfg.echo());
    csv.push_str(ABLATION_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&ablation_row(r));
        csv.push('\n');
    }
    fs::write(out.join("ablation.csv"), csv).context("writing ablation table")?;
    for r in &rows {
        println!("{}", ablation_row(r));
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, out: Option<&Path>, tolerance: f64, inject_fault: bool) -> CmdResult {
    let opts = GradcheckOptions {
        tolerance,
        seed,
        fault: inject_fault.then_some(GradFault::NegateRowHadamard),
        ..GradcheckOptions::default()
    };
    let report = run_suite(&opts)?;
    for b in &report {
        println!(
            "{:<24} {:>5} checked  max_rel_err {:.3e}  {}",
            b.block,
            b.checked,
            b.max_rel_err,
            if b.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).context("creating output dir")?;
        let body = serde_json::json!({ "seed": seed, "tolerance": tolerance, "blocks": report });
        fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&body).map_err(anyhow::Error::from)?)
            .context("writing gradcheck report")?;
    }
    if report.iter().all(|b| b.passed) {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            err: anyhow!("gradient check failed"),
        })
    }
}

fn cmd_viz(c: &Common, checkpoint: &Path, block: usize, split: &str, query: usize, stage: usize) -> CmdResult {
    let cfg = load_config(c)?;
    let ck = load_matching(&cfg, checkpoint)?;
    let corpus = load_corpus(&cfg)?;
    let blocks = split_blocks(&corpus, split)?;
    let b = blocks
        .get(block)
        .ok_or_else(|| anyhow!("block index {block} out of range: split has {} blocks", blocks.len()))?;
    let dump = viz_dump(&ck.model(), b, query, stage)?;
    let out = out_dir(c)?;
    let pre = csv_preamble(cfg.seed, &cfg.echo());
    let write = |name: String, body: &str| fs::write(out.join(name), format!("{pre}{body}"));
    for (s, body) in dump.selections.iter().enumerate() {
        write(format!("stage{}_selection.csv", s + 1), body).context("writing dump")?;
    }
    write(format!("stage{stage}_map_row{query}.csv"), &dump.map_row).context("writing dump")?;
    write("predictions.csv".into(), &dump.predictions).context("writing dump")?;
    Ok(())
}

fn cmd_synth(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    let out = out_dir(c)?;
    let eval = eval_synth_options(&cfg);
    for (split, opts) in [("train", &cfg.synth), ("eval", &eval)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir).context("creating split dir")?;
        for b in synth_generate(opts)? {
            write_block(&dir.join(format!("{}.blk", b.id)), &b, opts.num_classes)?;
        }
    }
    fs::write(out.join("synth.cfg"), format!("# seed = {}\n{}", cfg.seed, cfg.echo())).context("writing echo")?;
    println!("wrote {} train and {} eval blocks to {}", cfg.synth.num_blocks, eval.num_blocks, out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
