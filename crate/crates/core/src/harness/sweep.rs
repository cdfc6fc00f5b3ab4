//! Pareto sweeps over the predictor reward weights and the horizon study
//! built on top of them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{run_evaluation, write_steps, write_summary, EvalSetup};
use crate::error::{Error, Result};
use crate::predictor::{episode_seed, train_predictor, CounterfactualSource, GoalPolicy, PredictorConfig, TrainingEpisode};
use crate::scorer::{FeatureMarginals, ScoreModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub index: usize,
    pub alpha: f64,
    pub tau: f64,
    pub failed: bool,
    pub rr: Option<f64>,
    pub rr_std: Option<f64>,
    pub rf: Option<f64>,
    pub rf_std: Option<f64>,
    pub episodes: usize,
    pub on_front: bool,
    /// Predictor checkpoint, relative to the sweep directory.
    pub checkpoint: String,
    pub message: String,
}

/// Marks the points not strictly dominated in (RR, RF). Sorts by RR, then
/// scans keeping the best RF seen at strictly higher RR.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0).then(points[b].1.total_cmp(&points[a].1)));
    let mut front = vec![false; points.len()];
    let mut best_above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let rr = points[order[i]].0;
        let group_max = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == rr {
            front[order[j]] = points[order[j]].1 == group_max && group_max > best_above;
            j += 1;
        }
        best_above = best_above.max(group_max);
        i = j;
    }
    front
}

/// Fixed inputs shared by every sweep point.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub model: Arc<ScoreModel>,
    pub marginals: Arc<FeatureMarginals>,
    pub source: CounterfactualSource,
    /// Training settings; the reward weights are replaced per point.
    pub predictor: PredictorConfig,
    /// Evaluation environment; its horizon and behavior should match
    /// `predictor.env`.
    pub eval: EvalSetup,
    pub episodes: usize,
    pub threads: usize,
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_training(path: &Path, rows: &[TrainingEpisode]) -> Result<()> {
    write_csv_rows(path, rows)
}

fn point_dir(index: usize) -> String {
    format!("point_{index:02}")
}

fn run_point(setup: &SweepSetup, index: usize, alpha: f64, tau: f64, out: Option<&Path>) -> Result<ParetoPoint> {
    let mut cfg = setup.predictor.clone();
    cfg.reward.alpha = alpha;
    cfg.reward.tau = tau;
    cfg.seed = episode_seed(setup.predictor.seed, index as u64);
    let checkpoint = format!("{}/predictor.bin", point_dir(index));
    let mut point = ParetoPoint {
        index,
        alpha,
        tau,
        failed: false,
        rr: None,
        rr_std: None,
        rf: None,
        rf_std: None,
        episodes: setup.episodes,
        on_front: false,
        checkpoint: checkpoint.clone(),
        message: String::new(),
    };
    let (predictor, training) = match train_predictor(&setup.model, &setup.marginals, &setup.source, &cfg) {
        Ok(r) => r,
        Err(Error::Divergence(msg)) => {
            log::warn!("sweep point {index} (alpha {alpha}, tau {tau}) failed: {msg}");
            point.failed = true;
            point.message = msg;
            return Ok(point);
        }
        Err(e) => return Err(e),
    };
    let predictor = Arc::new(predictor);
    let mut eval_setup = setup.eval.clone();
    eval_setup.goals = GoalPolicy::Learned(Arc::clone(&predictor));
    eval_setup.reward = cfg.reward.clone();
    let eval = match run_evaluation(&eval_setup, setup.episodes) {
        Ok(e) => e,
        Err(Error::Divergence(msg)) => {
            point.failed = true;
            point.message = msg;
            return Ok(point);
        }
        Err(e) => return Err(e),
    };
    point.rr = eval.mean("rr");
    point.rr_std = eval.std("rr");
    point.rf = eval.mean("rf");
    point.rf_std = eval.std("rf");
    if let Some(dir) = out {
        let dir = dir.join(point_dir(index));
        std::fs::create_dir_all(&dir)?;
        predictor.save(&dir.join("predictor.bin"))?;
        write_training(&dir.join("training.csv"), &training)?;
        write_steps(&eval.steps, BufWriter::new(File::create(dir.join("eval_steps.csv"))?))?;
        write_summary(&eval.summary, BufWriter::new(File::create(dir.join("eval_summary.csv"))?))?;
    }
    Ok(point)
}

/// Trains and evaluates one predictor per `(alpha, tau)` entry. Points run
/// on a worker pool; each writes only to its own directory, and the point
/// list is merged in grid order.
pub fn run_pareto_sweep(setup: &SweepSetup, grid: &[(f64, f64)], out: Option<&Path>) -> Result<Vec<ParetoPoint>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<ParetoPoint>> =
        pool.install(|| grid.par_iter().enumerate().map(|(i, &(a, t))| run_point(setup, i, a, t, out)).collect());
    let mut points = results.into_iter().collect::<Result<Vec<_>>>()?;
    let ok: Vec<usize> = points.iter().filter(|p| !p.failed).map(|p| p.index).collect();
    let coords: Vec<(f64, f64)> =
        ok.iter().map(|&i| (points[i].rr.unwrap_or(0.0), points[i].rf.unwrap_or(0.0))).collect();
    for (k, on) in pareto_front(&coords).into_iter().enumerate() {
        points[ok[k]].on_front = on;
    }
    if let Some(dir) = out {
        write_csv_rows(&dir.join("points.csv"), &points)?;
    }
    Ok(points)
}

/// Index of the successful point whose RR is closest to `target`; ties go
/// to the lower index.
pub fn select_matched(points: &[ParetoPoint], target: f64) -> Option<usize> {
    points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| if p.failed { None } else { p.rr.map(|rr| (i, (rr - target).abs())) })
        .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: u64,
    pub point: Option<usize>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub rr: Option<f64>,
    pub rf: Option<f64>,
    /// No point lies within the RR tolerance of the target.
    pub gap: bool,
}

/// Builds one horizon row from a finished sweep.
pub fn horizon_row(horizon: u64, points: &[ParetoPoint], target: f64, tolerance: f64) -> HorizonRow {
    match select_matched(points, target) {
        None => HorizonRow { horizon, point: None, alpha: None, tau: None, rr: None, rf: None, gap: true },
        Some(i) => {
            let p = &points[i];
            let gap = p.rr.is_none_or(|rr| (rr - target).abs() > tolerance);
            if gap {
                log::warn!("horizon {horizon}: closest RR {:?} is farther than {tolerance} from {target}", p.rr);
            }
            HorizonRow { horizon, point: Some(p.index), alpha: Some(p.alpha), tau: Some(p.tau), rr: p.rr, rf: p.rf, gap }
        }
    }
}

/// Warns when RF at the matched point rises with the horizon.
pub fn check_trend(rows: &[HorizonRow]) -> bool {
    let mut ok = true;
    for w in rows.windows(2) {
        if let (Some(a), Some(b)) = (w[0].rf, w[1].rf) {
            if b > a {
                log::warn!("RF rises from {a:.3} at T={} to {b:.3} at T={}", w[0].horizon, w[1].horizon);
                ok = false;
            }
        }
    }
    ok
}

/// Runs one sweep per horizon and selects the point closest to the RR
/// target in each.
pub fn run_horizon_study(
    setup: &SweepSetup,
    grid: &[(f64, f64)],
    horizons: &[u64],
    target: f64,
    tolerance: f64,
    out: Option<&Path>,
) -> Result<Vec<HorizonRow>> {
    let mut rows = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let mut s = setup.clone();
        s.predictor.env.horizon = t;
        s.eval.env.horizon = t;
        let dir: Option<PathBuf> = out.map(|d| d.join(format!("T{t}")));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let points = run_pareto_sweep(&s, grid, dir.as_deref())?;
        rows.push(horizon_row(t, &points, target, tolerance));
    }
    check_trend(&rows);
    if let Some(d) = out {
        write_csv_rows(&d.join("horizon.csv"), &rows)?;
    }
    Ok(rows)
}

/// Writes any serializable rows as CSV with a header line.
pub fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(points: &[(f64, f64)]) -> Vec<bool> {
        points
            .iter()
            .map(|&(r, f)| !points.iter().any(|&(r2, f2)| r2 >= r && f2 >= f && (r2 > r || f2 > f)))
            .collect()
    }

    fn point(index: usize, rr: Option<f64>, failed: bool) -> ParetoPoint {
        ParetoPoint {
            index,
            alpha: 1.0,
            tau: 1.0,
            failed,
            rr,
            rr_std: None,
            rf: Some(0.5),
            rf_std: None,
            episodes: 1,
            on_front: false,
            checkpoint: String::new(),
            message: String::new(),
        }
    }

    #[test]
    fn single_point_is_the_front() {
        assert_eq!(pareto_front(&[(0.3, 0.2)]), vec![true]);
        assert!(pareto_front(&[]).is_empty());
    }

    #[test]
    fn duplicates_stay_on_front() {
        assert_eq!(pareto_front(&[(0.5, 0.5), (0.5, 0.5), (0.5, 0.4)]), vec![true, true, false]);
    }

    proptest! {
        #[test]
        fn front_matches_pairwise_dominance(pts in prop::collection::vec((0u8..8, 0u8..8), 0..40)) {
            let pts: Vec<(f64, f64)> = pts.into_iter().map(|(a, b)| (a as f64 / 8.0, b as f64 / 8.0)).collect();
            prop_assert_eq!(pareto_front(&pts), brute_force(&pts));
        }

        #[test]
        fn matched_point_is_linear_scan_argmin(rrs in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..20), target in 0.0f64..1.0) {
            let points: Vec<ParetoPoint> = rrs.iter().enumerate().map(|(i, &r)| point(i, r, false)).collect();
            let mut best: Option<(usize, f64)> = None;
            for (i, p) in points.iter().enumerate() {
                if let Some(rr) = p.rr {
                    let d = (rr - target).abs();
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
            }
            prop_assert_eq!(select_matched(&points, target), best.map(|b| b.0));
        }
    }

    #[test]
    fn failed_points_are_never_selected() {
        let points = vec![point(0, Some(0.95), true), point(1, Some(0.5), false)];
        assert_eq!(select_matched(&points, 0.95), Some(1));
        let row = horizon_row(1, &points, 0.95, 0.05);
        assert!(row.gap);
        assert_eq!(row.point, Some(1));
    }

    #[test]
    fn single_horizon_has_no_trend_violation() {
        let row = horizon_row(1, &[point(0, Some(0.93), false)], 0.95, 0.05);
        assert!(!row.gap);
        assert!(check_trend(&[row]));
    }
}
