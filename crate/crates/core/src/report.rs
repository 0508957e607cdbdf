//! Metrics output: CSV and JSON records, an SVG accuracy chart, and the
//! side-by-side comparison of two runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ClientId, ModelId};
use crate::sim::{ClientAccuracy, RoundMetrics};

pub const CSV_HEADER: [&str; 7] = [
    "round",
    "client_id",
    "model_id",
    "accuracy",
    "bytes_down",
    "bytes_up",
    "registry_size",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}: missing or unexpected header (want {1})")]
    BadHeader(String, String),
    #[error("{0}: no records")]
    Empty(String),
    #[error("client sets differ: {0:?} vs {1:?}")]
    ClientMismatch(Vec<ClientId>, Vec<ClientId>),
}

/// One CSV/JSON row: a client's result in a round, with the round totals repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: u64,
    pub client_id: ClientId,
    pub model_id: ModelId,
    pub accuracy: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub registry_size: usize,
}

pub fn to_records(metrics: &[RoundMetrics]) -> Vec<MetricRecord> {
    metrics
        .iter()
        .flat_map(|m| {
            m.per_client.iter().map(move |c| MetricRecord {
                round: m.round,
                client_id: c.client_id,
                model_id: c.model_id,
                accuracy: c.accuracy,
                bytes_down: m.bytes_down,
                bytes_up: m.bytes_up,
                registry_size: m.registry_size,
            })
        })
        .collect()
}

/// Regroups records by round (records of a round must be contiguous).
pub fn from_records(records: &[MetricRecord]) -> Vec<RoundMetrics> {
    let mut out: Vec<RoundMetrics> = Vec::new();
    for r in records {
        let client = ClientAccuracy {
            client_id: r.client_id,
            model_id: r.model_id,
            accuracy: r.accuracy,
        };
        match out.last_mut() {
            Some(m) if m.round == r.round => m.per_client.push(client),
            _ => out.push(RoundMetrics {
                round: r.round,
                per_client: vec![client],
                bytes_down: r.bytes_down,
                bytes_up: r.bytes_up,
                registry_size: r.registry_size,
            }),
        }
    }
    out
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in to_records(metrics) {
        w.serialize(r)?;
    }
    // An empty run still gets its header.
    let mut bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    if bytes.is_empty() {
        bytes = format!("{}\n", CSV_HEADER.join(",")).into_bytes();
    }
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn metrics_json(metrics: &[RoundMetrics]) -> Result<String, ReportError> {
    Ok(serde_json::to_string_pretty(&to_records(metrics))?)
}

pub fn parse_csv(text: &str, origin: &str) -> Result<Vec<MetricRecord>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(ReportError::BadHeader(origin.into(), CSV_HEADER.join(",")));
    }
    let records = r.deserialize().collect::<Result<Vec<MetricRecord>, _>>()?;
    if records.is_empty() {
        return Err(ReportError::Empty(origin.into()));
    }
    Ok(records)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRecord>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text, &path.display().to_string())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Accuracy-per-round line chart, one polyline per client.
pub fn accuracy_svg(metrics: &[RoundMetrics], title: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 130.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let last_round = metrics.iter().map(|m| m.round).max().unwrap_or(1).max(1);
    let first_round = metrics.iter().map(|m| m.round).min().unwrap_or(1);
    let span = (last_round - first_round).max(1) as f64;
    let x = |r: u64| left + pw * (r - first_round) as f64 / span;
    let y = |a: f64| top + ph * (1.0 - a.clamp(0.0, 1.0));

    let mut series: BTreeMap<ClientId, Vec<(u64, f64)>> = BTreeMap::new();
    for m in metrics {
        for c in &m.per_client {
            series
                .entry(c.client_id)
                .or_default()
                .push((m.round, c.accuracy));
        }
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for i in 0..=10 {
        let a = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#e0e0e0"/><text x="{2:.1}" y="{3:.1}" text-anchor="end">{4}%</text>"##,
            y(a),
            left + pw,
            left - 6.0,
            y(a) + 4.0,
            i * 10
        );
    }
    for r in first_round..=last_round {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{r}</text>"#,
            x(r),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (client, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = pts
            .iter()
            .map(|&(r, a)| format!("{:.2},{:.2}", x(r), y(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 16.0 + 20.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">client {client}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `metrics.csv`, `metrics.json` and `accuracy.svg` into `dir`.
pub fn write_outputs(dir: &Path, metrics: &[RoundMetrics], title: &str) -> Result<(), ReportError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| ReportError::Io { path: p, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let files = [
        ("metrics.csv", metrics_csv(metrics)?),
        ("metrics.json", metrics_json(metrics)?),
        ("accuracy.svg", accuracy_svg(metrics, title)),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io(&path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub client_id: ClientId,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `accuracy_b - accuracy_a`
    pub difference: f64,
}

fn final_round(records: &[MetricRecord]) -> BTreeMap<ClientId, f64> {
    let last = records.iter().map(|r| r.round).max().unwrap_or(0);
    records
        .iter()
        .filter(|r| r.round == last)
        .map(|r| (r.client_id, r.accuracy))
        .collect()
}

/// Final-round accuracy per client for two runs over the same clients.
pub fn compare(a: &[MetricRecord], b: &[MetricRecord]) -> Result<Vec<ComparisonRow>, ReportError> {
    let (fa, fb) = (final_round(a), final_round(b));
    if fa.keys().ne(fb.keys()) {
        return Err(ReportError::ClientMismatch(
            fa.keys().copied().collect(),
            fb.keys().copied().collect(),
        ));
    }
    Ok(fa
        .iter()
        .map(|(&id, &x)| ComparisonRow {
            client_id: id,
            accuracy_a: x,
            accuracy_b: fb[&id],
            difference: fb[&id] - x,
        })
        .collect())
}

pub fn format_comparison(rows: &[ComparisonRow], name_a: &str, name_b: &str) -> String {
    let mut s = format!(
        "{:>9}  {:>12}  {:>12}  {:>10}\n",
        "client_id", name_a, name_b, "diff"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>9}  {:>11.2}%  {:>11.2}%  {:>+9.2}%",
            r.client_id,
            100.0 * r.accuracy_a,
            100.0 * r.accuracy_b,
            100.0 * r.difference
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RoundMetrics> {
        (1..=3)
            .map(|round| RoundMetrics {
                round,
                per_client: vec![
                    ClientAccuracy {
                        client_id: 1,
                        model_id: 0,
                        accuracy: 0.5 + 0.1 * round as f64,
                    },
                    ClientAccuracy {
                        client_id: 2,
                        model_id: 1,
                        accuracy: 0.25 * round as f64,
                    },
                ],
                bytes_down: 100 * round,
                bytes_up: 200,
                registry_size: 2,
            })
            .collect()
    }

    #[test]
    fn csv_and_json_carry_the_same_records() {
        let m = sample();
        let csv = metrics_csv(&m).unwrap();
        assert!(csv
            .starts_with("round,client_id,model_id,accuracy,bytes_down,bytes_up,registry_size\n"));
        let from_csv = parse_csv(&csv, "x").unwrap();
        let from_json: Vec<MetricRecord> =
            serde_json::from_str(&metrics_json(&m).unwrap()).unwrap();
        assert_eq!(from_csv, from_json);
        assert_eq!(from_records(&from_csv), m);
    }

    #[test]
    fn svg_is_deterministic_with_one_line_per_client() {
        let a = accuracy_svg(&sample(), "t");
        assert_eq!(a, accuracy_svg(&sample(), "t"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("client 2"));
    }

    #[test]
    fn compare_identical_and_mismatched() {
        let r = to_records(&sample());
        let rows = compare(&r, &r).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|x| x.difference == 0.0));
        let fewer: Vec<MetricRecord> = r.iter().filter(|x| x.client_id == 1).cloned().collect();
        assert!(matches!(
            compare(&r, &fewer),
            Err(ReportError::ClientMismatch(..))
        ));
    }

    #[test]
    fn missing_header_is_rejected() {
        assert!(matches!(
            parse_csv("1,1,0,0.5,1,1,1\n", "x"),
            Err(ReportError::BadHeader(..))
        ));
        assert!(matches!(
            parse_csv(&format!("{}\n", CSV_HEADER.join(",")), "x"),
            Err(ReportError::Empty(_))
        ));
    }
}
