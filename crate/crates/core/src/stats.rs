//! MUSHRA response aggregation, paired t-tests and Bonferroni-Holm
//! correction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::IntensityLevel;
#[allow(unused_imports)] // float math for no_std; inherent methods need std
use num_traits::Float;

/// One listener's rating of one system on one screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MushraResponse {
    pub listener_id: String,
    pub system: String,
    pub utterance_id: String,
    pub intensity: IntensityLevel,
    pub score: f64,
}

impl MushraResponse {
    pub fn new(
        listener_id: impl Into<String>,
        system: impl Into<String>,
        utterance_id: impl Into<String>,
        intensity: IntensityLevel,
        score: f64,
    ) -> Result<Self> {
        let r = Self {
            listener_id: listener_id.into(),
            system: system.into(),
            utterance_id: utterance_id.into(),
            intensity,
            score,
        };
        if r.listener_id.is_empty() || r.system.is_empty() || r.utterance_id.is_empty() {
            return Err(Error::InvalidArgument("response ids must be non-empty".into()));
        }
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [0, 100]")));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    System,
    SystemIntensity,
}

/// Box-plot statistics of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    /// `None` when aggregated over all intensities.
    pub intensity: Option<IntensityLevel>,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Scores are summed in units of 1e-6, exactly; means are therefore exact
/// for inputs with up to six decimals and independent of row order.
const SCORE_UNITS: f64 = 1e6;

fn exact_mean(sorted: &[f64]) -> f64 {
    let total: i64 = sorted.iter().map(|s| (s * SCORE_UNITS).round() as i64).sum();
    total as f64 / (sorted.len() as f64 * SCORE_UNITS)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, median, quartiles and range per group, ordered by system then
/// intensity.
pub fn aggregate(responses: &[MushraResponse], group_by: GroupBy) -> Result<Vec<SummaryRow>> {
    if responses.is_empty() {
        return Err(Error::Empty("response table"));
    }
    let mut groups: BTreeMap<(&str, Option<IntensityLevel>), Vec<f64>> = BTreeMap::new();
    for r in responses {
        let key = match group_by {
            GroupBy::System => (r.system.as_str(), None),
            GroupBy::SystemIntensity => (r.system.as_str(), Some(r.intensity)),
        };
        groups.entry(key).or_default().push(r.score);
    }
    Ok(groups
        .into_iter()
        .map(|((system, intensity), mut scores)| {
            scores.sort_by(f64::total_cmp);
            SummaryRow {
                system: system.into(),
                intensity,
                n: scores.len(),
                mean: exact_mean(&scores),
                median: quantile(&scores, 0.5),
                q1: quantile(&scores, 0.25),
                q3: quantile(&scores, 0.75),
                min: scores[0],
                max: scores[scores.len() - 1],
            }
        })
        .collect())
}

/// Responses of one intensity slice.
pub fn filter_intensity(responses: &[MushraResponse], level: IntensityLevel) -> Vec<MushraResponse> {
    responses.iter().filter(|r| r.intensity == level).cloned().collect()
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = core::f64::consts::PI;
        return libm::log(pi / libm::sin(pi * x)) - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * libm::log(2.0 * core::f64::consts::PI) + (x + 0.5) * libm::log(t) - t + libm::log(a)
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * libm::log(x) + b * libm::log(1.0 - x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df`
/// degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(0.5 * df, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// Differences had zero variance but a non-zero mean.
    pub degenerate: bool,
}

/// Paired two-sided t-test of `mean(a - b) = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                df,
                p: 1.0,
                degenerate: false,
            }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = student_t_two_sided(t, df as f64).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        df,
        p,
        degenerate: false,
    })
}

/// Holm's step-down procedure. Returns reject flags in input order.
pub fn bonferroni_holm(pvalues: &[f64], alpha: f64) -> Result<Vec<bool>> {
    Ok(holm_ranks(pvalues, alpha)?.into_iter().map(|(_, _, r)| r).collect())
}

/// For every p-value: 1-based rank in ascending order, its Holm threshold
/// `alpha / (m - rank + 1)`, and the reject flag.
fn holm_ranks(pvalues: &[f64], alpha: f64) -> Result<Vec<(usize, f64, bool)>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort keeps ties in input order.
    order.sort_by(|&i, &j| pvalues[i].total_cmp(&pvalues[j]));
    let mut out = alloc::vec![(0, 0.0, false); m];
    let mut rejecting = true;
    for (pos, &i) in order.iter().enumerate() {
        let threshold = alpha / (m - pos) as f64;
        rejecting = rejecting && pvalues[i] <= threshold;
        out[i] = (pos + 1, threshold, rejecting);
    }
    Ok(out)
}

/// Result of one pairwise system comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub system_a: String,
    pub system_b: String,
    /// Aligned (listener, utterance) cells.
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    pub holm_rank: usize,
    pub holm_threshold: f64,
    pub reject: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub alpha: f64,
    pub outcomes: Vec<TestOutcome>,
    /// Cells present for one system of a pair but missing for the other,
    /// summed over pairs.
    pub dropped_cells: usize,
}

type Cell<'a> = (&'a str, &'a str, IntensityLevel);

/// Paired t-tests between every pair of systems on their aligned
/// (listener, utterance) cells, Holm-corrected over the pair family.
///
/// Repeated ratings of one cell are averaged. Pairs with fewer than two
/// aligned cells get `p = 1`.
pub fn mushra_compare(responses: &[MushraResponse], alpha: f64) -> Result<Comparison> {
    let mut by_system: BTreeMap<&str, BTreeMap<Cell, (f64, usize)>> = BTreeMap::new();
    for r in responses {
        let cell = (r.listener_id.as_str(), r.utterance_id.as_str(), r.intensity);
        let e = by_system
            .entry(r.system.as_str())
            .or_default()
            .entry(cell)
            .or_insert((0.0, 0));
        e.0 += r.score;
        e.1 += 1;
    }
    if by_system.len() < 2 {
        return Err(Error::InvalidArgument("need at least two systems".into()));
    }
    let systems: Vec<&str> = by_system.keys().copied().collect();
    let mut dropped = 0;
    let mut raw = Vec::new();
    for i in 0..systems.len() {
        for j in i + 1..systems.len() {
            let (sa, sb) = (&by_system[systems[i]], &by_system[systems[j]]);
            let ka: BTreeSet<&Cell> = sa.keys().collect();
            let kb: BTreeSet<&Cell> = sb.keys().collect();
            let shared: Vec<&Cell> = ka.intersection(&kb).copied().collect();
            dropped += ka.len() + kb.len() - 2 * shared.len();
            let a: Vec<f64> = shared.iter().map(|c| sa[*c].0 / sa[*c].1 as f64).collect();
            let b: Vec<f64> = shared.iter().map(|c| sb[*c].0 / sb[*c].1 as f64).collect();
            let test = if shared.len() >= 2 {
                paired_t_test(&a, &b)?
            } else {
                TTest {
                    t: 0.0,
                    df: 0,
                    p: 1.0,
                    degenerate: false,
                }
            };
            let mean_diff = if shared.is_empty() {
                0.0
            } else {
                a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / shared.len() as f64
            };
            raw.push((systems[i], systems[j], shared.len(), mean_diff, test));
        }
    }
    let ps: Vec<f64> = raw.iter().map(|r| r.4.p).collect();
    let ranks = holm_ranks(&ps, alpha)?;
    let outcomes = raw
        .into_iter()
        .zip(ranks)
        .map(|((a, b, n, mean_diff, test), (rank, threshold, reject))| TestOutcome {
            system_a: a.into(),
            system_b: b.into(),
            n,
            mean_diff,
            t: test.t,
            p: test.p,
            holm_rank: rank,
            holm_threshold: threshold,
            reject,
            degenerate: test.degenerate,
        })
        .collect();
    Ok(Comparison {
        alpha,
        outcomes,
        dropped_cells: dropped,
    })
}
