//! Architecture x flow-length sweeps over several seeds.

use std::fmt::Write as _;

use hfvc_core::eval::median;
use hfvc_core::flow::Arch;
use hfvc_core::synthdata::Utterance;
use hfvc_core::training::{train, Checkpoint, MetricLog, TrainConfig, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub arch: Arch,
    #[serde(default)]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub points: Vec<GridPoint>,
}

pub const FLOW_LENGTHS: [usize; 4] = [2, 4, 8, 16];

impl Default for SweepGrid {
    /// The baseline plus every flow architecture at 2, 4, 8 and 16 vectors.
    fn default() -> Self {
        let mut points = vec![GridPoint {
            arch: Arch::Vanilla,
            k: 0,
        }];
        for arch in [Arch::Arch1, Arch::Arch2, Arch::Arch3] {
            points.extend(FLOW_LENGTHS.iter().map(|&k| GridPoint { arch, k }));
        }
        Self { points }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
            RunStatus::Failed => "failed",
        }
    }
}

/// Outcome of one (grid point, seed) training run.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub point: GridPoint,
    pub seed: u64,
    pub config: TrainConfig,
    pub status: RunStatus,
    pub final_kl: Option<f64>,
    pub final_recon: Option<f64>,
    pub message: Option<String>,
    pub checkpoint: Option<Checkpoint>,
    pub log: MetricLog,
}

impl SweepRun {
    /// Directory name used for per-run artifacts.
    pub fn label(&self) -> String {
        format!(
            "{}-k{}-seed{}",
            self.point.arch.as_str(),
            self.config.flow_len(),
            self.seed
        )
    }
}

/// Config for one grid point and seed derived from `base`.
pub fn run_config(base: &TrainConfig, point: GridPoint, seed: u64) -> TrainConfig {
    TrainConfig {
        arch: point.arch,
        k: if point.arch.has_flow() { point.k } else { 0 },
        seed,
        ..base.clone()
    }
}

fn run_one(base: &TrainConfig, point: GridPoint, seed: u64, train_set: &[Utterance]) -> SweepRun {
    let config = run_config(base, point, seed);
    let mut clock = || 0;
    let mut run = SweepRun {
        point,
        seed,
        config: config.clone(),
        status: RunStatus::Ok,
        final_kl: None,
        final_recon: None,
        message: None,
        checkpoint: None,
        log: MetricLog::default(),
    };
    match train(&config, train_set, &mut clock) {
        Ok((ckpt, log)) => {
            run.final_kl = ckpt.final_kl;
            run.final_recon = ckpt.final_recon;
            run.checkpoint = Some(ckpt);
            run.log = log;
        }
        Err(TrainError::Diverged(d)) => {
            run.status = RunStatus::Diverged;
            run.message = Some(format!("diverged at step {}", d.step));
            run.log = d.log;
        }
        Err(TrainError::Model(e)) => {
            run.status = RunStatus::Failed;
            run.message = Some(e.to_string());
        }
    }
    run
}

/// Trains every grid point with every seed, in parallel. Results come back
/// in grid order, seeds innermost, independent of scheduling.
pub fn run_sweep(base: &TrainConfig, grid: &SweepGrid, seeds: &[u64], train_set: &[Utterance]) -> Vec<SweepRun> {
    let jobs: Vec<(GridPoint, u64)> = grid
        .points
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    jobs.par_iter().map(|&(p, s)| run_one(base, p, s, train_set)).collect()
}

pub const SWEEP_HEADER: &str = "arch\tK\tfinal_kl\tfinal_recon\tstatus";
pub const SUMMARY_HEADER: &str = "arch\tK\tmedian_kl\tmedian_recon\tn_ok\trel_kl_change";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// One row per run, in run order.
pub fn sweep_tsv(runs: &[SweepRun]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in runs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.point.arch.as_str(),
            r.config.flow_len(),
            cell(r.final_kl),
            cell(r.final_recon),
            r.status.as_str()
        )
        .expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arch: Arch,
    pub k: usize,
    pub median_kl: Option<f64>,
    pub median_recon: Option<f64>,
    pub n_ok: usize,
    /// `(kl_vanilla - kl) / kl_vanilla` on medians, when a vanilla row exists.
    pub rel_kl_change: Option<f64>,
}

/// Median final metrics over the successful seeds of each grid point.
pub fn summarize(runs: &[SweepRun]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in runs {
        let k = r.config.flow_len();
        if !rows.iter().any(|s| s.arch == r.point.arch && s.k == k) {
            let ok: Vec<&SweepRun> = runs
                .iter()
                .filter(|o| o.point.arch == r.point.arch && o.config.flow_len() == k && o.status == RunStatus::Ok)
                .collect();
            let kls: Vec<f64> = ok.iter().filter_map(|o| o.final_kl).collect();
            let recons: Vec<f64> = ok.iter().filter_map(|o| o.final_recon).collect();
            rows.push(SummaryRow {
                arch: r.point.arch,
                k,
                median_kl: median(&kls),
                median_recon: median(&recons),
                n_ok: ok.len(),
                rel_kl_change: None,
            });
        }
    }
    let vanilla = rows.iter().find(|r| r.arch == Arch::Vanilla).and_then(|r| r.median_kl);
    for r in &mut rows {
        r.rel_kl_change = match (vanilla, r.median_kl) {
            (Some(v), Some(kl)) if v != 0.0 => Some((v - kl) / v),
            _ => None,
        };
    }
    rows
}

pub fn summary_tsv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.arch.as_str(),
            r.k,
            cell(r.median_kl),
            cell(r.median_recon),
            r.n_ok,
            cell(r.rel_kl_change)
        )
        .expect("string write");
    }
    out
}
