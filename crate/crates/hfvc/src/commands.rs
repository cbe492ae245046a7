//! Subcommand implementations. Each returns the text it would print.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hfvc_core::eval::{one_shot_synthesize, transfer_report};
use hfvc_core::seq2seq::PhonemeSequence;
use hfvc_core::synthdata::{generate_corpus, style_oracle, Corpus};
use hfvc_core::training::{train, Checkpoint, TrainConfig, TrainError};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{
    metric_log_tsv, read_checkpoint, read_corpus, read_text, to_json, write_checkpoint, write_corpus, write_file,
    write_mel,
};
use crate::mushra;
use crate::sweep::{run_sweep, summarize, summary_tsv, sweep_tsv, RunStatus, SweepGrid};

pub const CHECKPOINT_FILE: &str = "checkpoint.hfvc";
pub const METRICS_FILE: &str = "metrics.tsv";

pub fn gen_data(config: &ExperimentConfig, seed: u64, out: &Path) -> CliResult<String> {
    let corpus = generate_corpus(&config.corpus, seed)?;
    write_corpus(out, &corpus)?;
    Ok(format!(
        "train {}\none-shot {}\nprompts {}\n",
        corpus.train.len(),
        corpus.one_shot.len(),
        corpus.prompts.len()
    ))
}

fn check_compatible(train: &TrainConfig, corpus: &Corpus) -> CliResult<()> {
    if train.vocab != corpus.spec.vocab || train.bands != corpus.spec.bands {
        return Err(CliError::input(format!(
            "model expects vocab {} / bands {}, corpus has {} / {}",
            train.vocab, train.bands, corpus.spec.vocab, corpus.spec.bands
        )));
    }
    Ok(())
}

/// Trains on the corpus in `corpus_dir` and writes the checkpoint and metric
/// log to `out`. `wall_clock` fills `wall_ms` with real elapsed time, which
/// makes the log non-reproducible; otherwise it is zero.
pub fn train_cmd(config: &TrainConfig, corpus_dir: &Path, out: &Path, wall_clock: bool) -> CliResult<String> {
    let corpus = read_corpus(corpus_dir)?;
    check_compatible(config, &corpus)?;
    let config = TrainConfig {
        corpus: Some(corpus_dir.display().to_string()),
        ..config.clone()
    };
    let start = Instant::now();
    let mut clock = || {
        if wall_clock {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let (ckpt, log) = match train(&config, &corpus.train, &mut clock) {
        Ok(r) => r,
        Err(TrainError::Diverged(d)) => {
            write_file(&out.join(METRICS_FILE), metric_log_tsv(&d.log).as_bytes())?;
            return Err(CliError::Numeric(format!(
                "training aborted at step {}: kl {} recon {}",
                d.step, d.kl, d.recon
            )));
        }
        Err(TrainError::Model(e)) => return Err(e.into()),
    };
    write_checkpoint(&out.join(CHECKPOINT_FILE), &ckpt)?;
    write_file(&out.join(METRICS_FILE), metric_log_tsv(&log).as_bytes())?;
    Ok(match (ckpt.final_kl, ckpt.final_recon) {
        (Some(kl), Some(recon)) => format!("final kl {kl}\nfinal recon {recon}\n"),
        _ => "no training steps\n".to_string(),
    })
}

/// Outcome of a sweep: the printed text and whether any run succeeded.
pub struct SweepOutcome {
    pub text: String,
    pub any_ok: bool,
}

pub fn sweep_cmd(
    base: &TrainConfig,
    grid: &SweepGrid,
    corpus_dir: &Path,
    seeds: &[u64],
    out: &Path,
) -> CliResult<SweepOutcome> {
    let corpus = read_corpus(corpus_dir)?;
    check_compatible(base, &corpus)?;
    let base = TrainConfig {
        corpus: Some(corpus_dir.display().to_string()),
        ..base.clone()
    };
    let runs = run_sweep(&base, grid, seeds, &corpus.train);
    for run in &runs {
        let dir = out.join("runs").join(run.label());
        write_file(&dir.join(METRICS_FILE), metric_log_tsv(&run.log).as_bytes())?;
        if let Some(ckpt) = &run.checkpoint {
            write_checkpoint(&dir.join(CHECKPOINT_FILE), ckpt)?;
        }
    }
    let table = sweep_tsv(&runs);
    let summary = summary_tsv(&summarize(&runs));
    write_file(&out.join("sweep.tsv"), table.as_bytes())?;
    write_file(&out.join("summary.tsv"), summary.as_bytes())?;
    let mut text = summary;
    for run in runs.iter().filter(|r| r.status != RunStatus::Ok) {
        let msg = run.message.as_deref().unwrap_or("");
        writeln!(text, "{}: {} {msg}", run.label(), run.status.as_str()).expect("string write");
    }
    Ok(SweepOutcome {
        text,
        any_ok: runs.iter().any(|r| r.status == RunStatus::Ok),
    })
}

fn corpus_for(ckpt: &Checkpoint, corpus_dir: Option<&Path>) -> CliResult<Corpus> {
    let dir = match (corpus_dir, &ckpt.config.corpus) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(CliError::input("no corpus given and checkpoint records none")),
    };
    let corpus = read_corpus(&dir)?;
    check_compatible(&ckpt.config, &corpus)?;
    Ok(corpus)
}

/// Resolves a prompt given as a corpus id or as comma-separated phoneme ids.
fn resolve_prompt(corpus: &Corpus, prompt: &str) -> CliResult<PhonemeSequence> {
    if let Some(p) = corpus.prompt(prompt) {
        return Ok(p.phonemes.clone());
    }
    if let Some(u) = corpus.utterance(prompt) {
        return Ok(u.phonemes.clone());
    }
    let ids: Result<Vec<usize>, _> = prompt.split(',').map(|s| s.trim().parse()).collect();
    match ids {
        Ok(ids) => Ok(PhonemeSequence::new(ids, corpus.spec.vocab)?),
        Err(_) => Err(CliError::input(format!("unknown prompt `{prompt}`"))),
    }
}

pub fn synth_cmd(
    checkpoint: &Path,
    corpus_dir: Option<&Path>,
    reference: &str,
    prompt: &str,
    out: &Path,
) -> CliResult<String> {
    let ckpt = read_checkpoint(checkpoint)?;
    let corpus = corpus_for(&ckpt, corpus_dir)?;
    let reference = corpus
        .utterance(reference)
        .ok_or_else(|| CliError::input(format!("unknown reference utterance `{reference}`")))?;
    let phonemes = resolve_prompt(&corpus, prompt)?;
    let inv = corpus.inventory();
    let model = ckpt.model()?;
    let mel = one_shot_synthesize(&model, &reference.mel, &phonemes, inv.frames_for(&phonemes))?;
    write_mel(out, &mel)?;
    let est = style_oracle(&mel, Some(&phonemes), &corpus.spec, &inv)?;
    Ok(format!("a_hat {}\nb_hat {}\n", est.intensity, est.tilt))
}

pub const REPORT_HEADER: &str = "level\tprompt_id\ta_hat\tb_hat";

pub fn eval_cmd(checkpoint: &Path, corpus_dir: Option<&Path>, out: &Path) -> CliResult<String> {
    let ckpt = read_checkpoint(checkpoint)?;
    let corpus = corpus_for(&ckpt, corpus_dir)?;
    let report = transfer_report(&ckpt.model()?, &corpus)?;
    let mut tsv = format!("{REPORT_HEADER}\n");
    for r in &report.rows {
        writeln!(tsv, "{}\t{}\t{}\t{}", r.level.as_str(), r.prompt_id, r.a_hat, r.b_hat).expect("string write");
    }
    write_file(&out.join("report.tsv"), tsv.as_bytes())?;
    let summary = to_json(&report.summary);
    write_file(&out.join("summary.json"), summary.as_bytes())?;
    Ok(summary)
}

pub fn mushra_cmd(responses: &Path, question: &str, alpha: f64, out: &Path) -> CliResult<String> {
    let rows = mushra::parse_csv(&read_text(responses)?)
        .map_err(|e| CliError::input(format!("{}: {e}", responses.display())))?;
    let summary = mushra::summary_tsv(&rows)?;
    let report = mushra::compare(&rows, question, alpha)?;
    write_file(&out.join(format!("{question}-summary.tsv")), summary.as_bytes())?;
    write_file(&out.join(format!("{question}-tests.json")), to_json(&report).as_bytes())?;
    let mut text = summary;
    for f in &report.families {
        for o in &f.comparison.outcomes {
            writeln!(
                text,
                "{} {} vs {}: p {} {}",
                f.intensity.as_str(),
                o.system_a,
                o.system_b,
                o.p,
                if o.reject { "reject" } else { "accept" }
            )
            .expect("string write");
        }
        if f.comparison.dropped_cells > 0 {
            writeln!(
                text,
                "warning: {} unmatched cells dropped ({})",
                f.comparison.dropped_cells,
                f.intensity.as_str()
            )
            .expect("string write");
        }
    }
    Ok(text)
}
