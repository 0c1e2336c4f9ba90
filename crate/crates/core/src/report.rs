//! Aggregation of run records into results tables and accuracy-over-tasks
//! plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Method;
use crate::error::{Error, Result};
use crate::metrics::EvalMode;
use crate::trainer::RunRecord;
use crate::util::{sig6, write_atomic};

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub name: String,
    pub method: String,
    pub buffer: bool,
    pub mode: EvalMode,
    pub seeds: usize,
    pub a_mean: f64,
    pub a_std: f64,
    /// `None` for single-task runs.
    pub f_mean: Option<f64>,
    pub f_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Every complete `run.json` below `dir`, in path order.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() == "run.json")
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    paths.iter().map(|p| RunRecord::read(p)).collect()
}

/// Groups records by config name and summarizes each evaluation mode.
pub fn aggregate(records: &[RunRecord]) -> Result<ResultsTable> {
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.config_name.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (name, mut recs) in groups {
        recs.sort_by_key(|r| r.seed);
        let first = recs[0];
        if let Some(other) = recs.iter().find(|r| r.config_hash != first.config_hash) {
            return Err(Error::Aggregation(format!(
                "group `{name}` mixes config hashes {} and {}",
                &first.config_hash[..12.min(first.config_hash.len())],
                &other.config_hash[..12.min(other.config_hash.len())]
            )));
        }
        let buffer = first.method.parse::<Method>().map(|m| m.uses_buffer()).unwrap_or(false);
        for &mode in first.matrices.keys() {
            let mut a = Vec::new();
            let mut f = Vec::new();
            for r in &recs {
                let m = r.matrix(mode)?;
                a.push(m.average_accuracy()?);
                if m.num_tasks >= 2 {
                    f.push(m.average_forgetting()?);
                }
            }
            let (a_mean, a_std) = mean_std(&a);
            let (f_mean, f_std) = if f.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&f);
                (Some(m), Some(s))
            };
            rows.push(ResultRow {
                name: name.to_string(),
                method: first.method.clone(),
                buffer,
                mode,
                seeds: recs.len(),
                a_mean,
                a_std,
                f_mean,
                f_std,
            });
        }
    }
    rows.sort_by(|x, y| (x.mode, &x.name).cmp(&(y.mode, &y.name)));
    Ok(ResultsTable { rows })
}

impl ResultsTable {
    pub fn row(&self, name: &str, mode: EvalMode) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.name == name && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,method,buffer,mode,seeds,a_t_mean,a_t_std,f_t_mean,f_t_std\n");
        let opt = |x: Option<f64>| x.map(sig6).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.name,
                r.method,
                r.buffer,
                r.mode.as_str(),
                r.seeds,
                sig6(r.a_mean),
                sig6(r.a_std),
                opt(r.f_mean),
                opt(r.f_std)
            );
        }
        s
    }

    /// Aligned plain-text table, one block per evaluation mode.
    pub fn to_text(&self) -> String {
        let header = ["Method", "Buffer", "A_T", "F_T", "Seeds"];
        let mut out = String::new();
        let mut modes: Vec<EvalMode> = self.rows.iter().map(|r| r.mode).collect();
        modes.dedup();
        for mode in modes {
            let cells: Vec<[String; 5]> = self
                .rows
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| {
                    [
                        r.name.clone(),
                        if r.buffer { "yes".into() } else { "no".into() },
                        format!("{:.2} ± {:.2}", r.a_mean, r.a_std),
                        match (r.f_mean, r.f_std) {
                            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
                            _ => "n/a".into(),
                        },
                        r.seeds.to_string(),
                    ]
                })
                .collect();
            let width = |i: usize| {
                cells
                    .iter()
                    .map(|c| c[i].chars().count())
                    .chain([header[i].len()])
                    .max()
                    .unwrap()
            };
            let widths: Vec<usize> = (0..5).map(width).collect();
            let line = |c: &[String]| {
                c.iter()
                    .zip(&widths)
                    .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let _ = writeln!(out, "[{}]", mode.as_str());
            let _ = writeln!(out, "{}", line(&header.map(String::from)));
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            for c in &cells {
                let _ = writeln!(out, "{}", line(c));
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregates every run under `dir` and writes `results.csv` and
/// `results.txt` there.
pub fn write_report(dir: &Path) -> Result<ResultsTable> {
    let records = collect_records(dir)?;
    if records.is_empty() {
        return Err(Error::EmptySource(format!("no completed runs under {}", dir.display())));
    }
    let table = aggregate(&records)?;
    write_atomic(&dir.join("results.csv"), table.to_csv().as_bytes())?;
    write_atomic(&dir.join("results.txt"), table.to_text().as_bytes())?;
    Ok(table)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Seed-mean accuracy over seen tasks after each task, per config name.
fn curves(records: &[RunRecord], mode: EvalMode) -> BTreeMap<String, Vec<f64>> {
    let mut acc: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for r in records {
        if let Ok(m) = r.matrix(mode) {
            let pts = (1..=m.num_tasks)
                .filter_map(|i| m.row(i).map(|row| row.iter().sum::<f64>() / row.len() as f64))
                .collect();
            acc.entry(r.config_name.clone()).or_default().push(pts);
        }
    }
    acc.into_iter()
        .map(|(name, runs)| {
            let len = runs.iter().map(Vec::len).min().unwrap_or(0);
            let mean = (0..len)
                .map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / runs.len() as f64)
                .collect();
            (name, mean)
        })
        .collect()
}

/// SVG line chart of accuracy on seen tasks versus tasks completed.
pub fn render_svg(title: &str, series: &BTreeMap<String, Vec<f64>>) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = series.values().map(Vec::len).max().unwrap_or(1).max(2);
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - v / 100.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    for k in 0..=5 {
        let v = k as f64 * 20.0;
        let _ = writeln!(s, r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/>"##, y(v), left + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v}</text>"#, left - 6.0, y(v) + 4.0);
    }
    for i in 0..n {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x(i), top + ph + 18.0, i + 1);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">tasks completed</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">accuracy on seen tasks (%)</text>"#, top + ph / 2.0, top + ph / 2.0);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().enumerate().map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for (i, v) in pts.iter().enumerate() {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(i), y(*v));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `accuracy_<mode>.svg` under `dir` for each mode present.
pub fn write_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let records = collect_records(dir)?;
    if records.is_empty() {
        return Err(Error::EmptySource(format!("no completed runs under {}", dir.display())));
    }
    let mut written = Vec::new();
    for mode in [EvalMode::TaskIl, EvalMode::ClassIl] {
        let series = curves(&records, mode);
        if series.is_empty() {
            continue;
        }
        let path = dir.join(format!("accuracy_{}.svg", mode.as_str()));
        let title = format!("Accuracy over tasks ({})", mode.as_str().replace('_', "-"));
        write_atomic(&path, render_svg(&title, &series).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
