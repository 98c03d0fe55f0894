use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::RunResult;
use super::ReportError;

pub const CSV_HEADER: [&str; 9] = [
    "config_id",
    "mechanism",
    "pattern",
    "S",
    "N",
    "precision",
    "metric",
    "value",
    "unit",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

impl OutputFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            OutputFormat::Csv => "report.csv",
            OutputFormat::Json => "report.json",
            OutputFormat::Svg => "report.svg",
        }
    }
}

/// One row per (config, metric); a failed config gets a single `error` row.
pub fn to_csv(results: &[RunResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("write to memory");
    for r in results {
        let c = &r.config;
        let (s, n) = (c.seq_len.to_string(), c.world_size.to_string());
        let head = [
            r.config_id.as_str(),
            c.mechanism.name(),
            c.pattern.snake_name(),
            &s,
            &n,
            c.precision.name(),
        ];
        if let Some(e) = &r.error {
            w.write_record(head.iter().copied().chain(["error", e.as_str(), ""]))
                .expect("write to memory");
            continue;
        }
        for m in &r.metrics {
            let value = m.value.to_string();
            w.write_record(head.iter().copied().chain([m.metric.as_str(), &value, &m.unit]))
                .expect("write to memory");
        }
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

#[derive(Serialize)]
struct Bundle<'a> {
    runs: &'a [RunResult],
}

pub fn to_json(results: &[RunResult]) -> String {
    serde_json::to_string_pretty(&Bundle { runs: results }).expect("results serialise")
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Line chart of `metric`, one series per (mechanism, pattern). The x axis is
/// the sequence length unless every run shares one, then the world size.
pub fn render_svg(results: &[RunResult], metric: &str) -> String {
    let ok: Vec<&RunResult> = results.iter().filter(|r| r.metric(metric).is_some()).collect();
    let by_seq = ok.iter().map(|r| r.config.seq_len).collect::<std::collections::BTreeSet<_>>().len() > 1;
    let x_of = |r: &RunResult| (if by_seq { r.config.seq_len } else { r.config.world_size }) as f64;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &ok {
        let key = format!("{} {}", r.config.mechanism, r.config.pattern.snake_name());
        series.entry(key).or_default().push((x_of(r), r.metric(metric).unwrap()));
    }
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let ys: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
    let (x0, x1) = (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let y1 = ys.iter().copied().fold(0.0, f64::max);
    let sx = |x: f64| {
        if x1 > x0 {
            PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD)
        } else {
            W / 2.0
        }
    };
    let sy = |y: f64| if y1 > 0.0 { H - PAD - y / y1 * (H - 2.0 * PAD) } else { H - PAD };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{0}" stroke="black"/>"#, H - PAD);
    let _ = writeln!(
        s,
        r#"<text x="{0}" y="{1}" text-anchor="middle">{2}</text>"#,
        W / 2.0,
        H - 16.0,
        if by_seq { "S" } else { "N" }
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" transform="rotate(-90 14 {0})" text-anchor="middle">{metric}</text>"#,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{0}" y="{1}" text-anchor="end">{2:.4}</text>"#,
        PAD - 4.0,
        PAD + 4.0,
        y1
    );
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{0:.1}" y="{1}" text-anchor="middle">{x}</text>"#,
            sx(x),
            H - PAD + 14.0
        );
    }
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{0}" y="{ly}" fill="{color}" text-anchor="end">{name}</text>"#,
            W - PAD
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the requested formats into `dir`, returning the paths written.
pub fn write_reports(results: &[RunResult], dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path, e: std::io::Error| ReportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        let path = dir.join(f.file_name());
        let body = match f {
            OutputFormat::Csv => to_csv(results),
            OutputFormat::Json => to_json(results),
            OutputFormat::Svg => render_svg(results, "forward_tflops"),
        };
        std::fs::write(&path, body).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
