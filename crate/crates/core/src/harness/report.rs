//! Static charts and a markdown summary built from the CSV artifacts of a
//! run directory.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::eval::{ComparisonRow, SummaryRow};
use super::sweep::{HorizonRow, ParetoPoint};
use crate::error::{Error, Result};
use crate::predictor::TrainingEpisode;

/// Reads a headed CSV; malformed rows surface as parse errors carrying the
/// 1-based line number.
pub fn read_csv<T: DeserializeOwned, R: Read>(input: R) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse { line, msg: e.to_string() }
        })?);
    }
    Ok(rows)
}

fn read_csv_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    read_csv(file).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

/// Moving average over a trailing window (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 50.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Points,
    Line,
    LineAndPoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Chart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            x_range: None,
            y_range: None,
            series: Vec::new(),
        }
    }

    pub fn to_svg(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = self.x_range.unwrap_or_else(|| range_of(all().map(|p| p.0)));
        let (y0, y1) = self.y_range.unwrap_or_else(|| range_of(all().map(|p| p.1)));
        let (ml, mr, mt, mb) = MARGIN;
        let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        let _ = writeln!(
            s,
            r#"<rect x="{ml:.1}" y="{mt:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
        );
        for k in 0..=5 {
            let f = k as f64 / 5.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(s, r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/>"#, mt + ph, mt + ph + 4.0);
            let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, mt + ph + 16.0, tick(xv));
            let _ = writeln!(s, r#"<line x1="{:.1}" y1="{py:.1}" x2="{ml:.1}" y2="{py:.1}" stroke="black"/>"#, ml - 4.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 6.0, py + 4.0, tick(yv));
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, HEIGHT - 12.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            mt + ph / 2.0,
            mt + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if matches!(series.mark, Mark::Line | Mark::LineAndPoints) && series.points.len() > 1 {
                let path: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            }
            if matches!(series.mark, Mark::Points | Mark::LineAndPoints) {
                for &(x, y) in &series.points {
                    let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, sx(x), sy(y));
                }
            }
            let ly = mt + 14.0 + 14.0 * i as f64;
            let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, ml + pw - 150.0, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, ml + pw - 136.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn ok_points(points: &[ParetoPoint]) -> impl Iterator<Item = &ParetoPoint> {
    points.iter().filter(|p| !p.failed && p.rr.is_some() && p.rf.is_some())
}

/// One line through the non-dominated points of each sweep.
pub fn pareto_chart(sweeps: &[(String, Vec<ParetoPoint>)]) -> Chart {
    let mut chart = Chart::new("Pareto fronts", "recourse reliability (RR)", "recourse feasibility (RF)");
    chart.x_range = Some((0.0, 1.0));
    chart.y_range = Some((0.0, 1.0));
    for (label, points) in sweeps {
        let mut front: Vec<(f64, f64)> =
            ok_points(points).filter(|p| p.on_front).map(|p| (p.rr.unwrap(), p.rf.unwrap())).collect();
        front.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart.series.push(Series { label: label.clone(), points: front, mark: Mark::LineAndPoints });
    }
    chart
}

pub fn convergence_chart(curves: &[(String, Vec<TrainingEpisode>)], window: usize) -> Chart {
    let mut chart = Chart::new("Predictor training", "episode", &format!("cumulative reward ({window}-episode mean)"));
    for (label, rows) in curves {
        let rewards: Vec<f64> = rows.iter().map(|r| r.total_reward).collect();
        let points = rows.iter().zip(moving_average(&rewards, window)).map(|(r, m)| (r.episode as f64, m)).collect();
        chart.series.push(Series { label: label.clone(), points, mark: Mark::Line });
    }
    chart
}

pub fn horizon_chart(rows: &[HorizonRow]) -> Chart {
    let mut chart = Chart::new("Feasibility at matched reliability", "validity horizon T", "RF");
    chart.y_range = Some((0.0, 1.0));
    let points = rows.iter().filter_map(|r| r.rf.map(|rf| (r.horizon as f64, rf))).collect();
    chart.series.push(Series { label: "matched point".into(), points, mark: Mark::LineAndPoints });
    chart
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn sorted_subdirs(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .collect();
    out.sort();
    Ok(out)
}

fn horizon_key(p: &Path) -> u64 {
    p.file_name().and_then(|n| n.to_str()).and_then(|n| n[1..].parse().ok()).unwrap_or(u64::MAX)
}

/// Reads whatever artifacts exist under `run` and writes charts plus
/// `report.md` into `out`. Returns the files written.
pub fn emit_report(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut md = String::from("# Run report\n\n");

    let summary_path = run.join("eval_summary.csv");
    if summary_path.exists() {
        let rows: Vec<SummaryRow> = read_csv_file(&summary_path)?;
        md.push_str("## Evaluation\n\n| metric | mean | std | episodes |\n|---|---|---|---|\n");
        for r in rows {
            let _ = writeln!(md, "| {} | {} | {} | {} |", r.metric, opt(r.mean), opt(r.std), r.episodes);
        }
        md.push('\n');
    }
    let cmp_path = run.join("eval_generators.csv");
    if cmp_path.exists() {
        let rows: Vec<ComparisonRow> = read_csv_file(&cmp_path)?;
        md.push_str("## Counterfactual generators\n\n| generator | candidates | mean error | max error | mean true cost |\n|---|---|---|---|---|\n");
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {} | {:.3e} | {:.3e} | {:.4} |",
                r.generator, r.candidates, r.mean_error, r.max_error, r.mean_true_cost
            );
        }
        md.push('\n');
    }

    let mut sweeps = Vec::new();
    let sweep_points = run.join("sweep").join("points.csv");
    if sweep_points.exists() {
        sweeps.push(("sweep".to_string(), read_csv_file::<ParetoPoint>(&sweep_points)?));
    }
    let mut horizon_dirs = sorted_subdirs(&run.join("horizon"), "T")?;
    horizon_dirs.sort_by_key(|p| horizon_key(p));
    for d in &horizon_dirs {
        let p = d.join("points.csv");
        if p.exists() {
            sweeps.push((format!("T={}", horizon_key(d)), read_csv_file(&p)?));
        }
    }
    let pareto = out.join("pareto.svg");
    std::fs::write(&pareto, pareto_chart(&sweeps).to_svg())?;
    written.push(pareto);
    for (label, points) in &sweeps {
        let _ = writeln!(md, "## Sweep `{label}`\n\n| point | alpha | tau | RR | RF | front | status |\n|---|---|---|---|---|---|---|");
        for p in points {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} |",
                p.index,
                p.alpha,
                p.tau,
                opt(p.rr),
                opt(p.rf),
                if p.on_front { "yes" } else { "no" },
                if p.failed { "failed" } else { "ok" }
            );
        }
        md.push('\n');
    }

    let mut curves = Vec::new();
    let single = run.join("predictor_training.csv");
    if single.exists() {
        curves.push(("predictor".to_string(), read_csv_file(&single)?));
    }
    for d in sorted_subdirs(&run.join("sweep"), "point_")? {
        let p = d.join("training.csv");
        if p.exists() {
            let name = d.file_name().and_then(|n| n.to_str()).unwrap_or("point").to_string();
            curves.push((name, read_csv_file(&p)?));
        }
    }
    if !curves.is_empty() {
        let path = out.join("convergence.svg");
        std::fs::write(&path, convergence_chart(&curves, 10).to_svg())?;
        written.push(path);
    }

    let horizon_csv = run.join("horizon").join("horizon.csv");
    if horizon_csv.exists() {
        let rows: Vec<HorizonRow> = read_csv_file(&horizon_csv)?;
        md.push_str("## Horizon study\n\n| T | point | RR | RF | gap |\n|---|---|---|---|---|\n");
        for r in &rows {
            let point = r.point.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(md, "| {} | {} | {} | {} | {} |", r.horizon, point, opt(r.rr), opt(r.rf), r.gap);
        }
        md.push('\n');
        let path = out.join("horizon.svg");
        std::fs::write(&path, horizon_chart(&rows).to_svg())?;
        written.push(path);
    }

    let path = out.join("report.md");
    std::fs::write(&path, md)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(moving_average(&[1.0, 2.0], 10), vec![1.0, 1.5]);
    }

    #[test]
    fn empty_chart_has_axes_only() {
        let svg = pareto_chart(&[]).to_svg();
        assert!(svg.contains("<rect x=\"60.0\""));
        assert!(!svg.contains("<circle"));
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn svg_is_deterministic() {
        let rows: Vec<TrainingEpisode> = (0..30)
            .map(|i| TrainingEpisode { episode: i, total_reward: (i as f64).sin(), mean_rr: None, mean_rf: None, mean_goal: 0.5 })
            .collect();
        let a = convergence_chart(&[("a".into(), rows.clone())], 10).to_svg();
        let b = convergence_chart(&[("a".into(), rows)], 10).to_svg();
        assert_eq!(a, b);
        assert!(a.contains("<polyline"));
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "metric,mean,std,episodes\nrr,0.5,0.1,3\nrf,oops,0.1,3\n";
        match read_csv::<SummaryRow, _>(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_on_empty_run_writes_axes_and_markdown() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(dir.path(), &dir.path().join("report")).unwrap();
        assert_eq!(files.len(), 2);
    }
}
