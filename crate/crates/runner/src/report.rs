//! Line-delimited metric records, summary documents, markdown tables and
//! SVG bar charts.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::ablation::{AblationTable, AggregateRow, Stat};
use crate::error::Result;

/// Appends one JSON object per line.
pub struct JsonlWriter<W: Write> {
    inner: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cell(s: &Stat) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

pub fn markdown_table(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "| variant | runs | mAP | mATE | mAVE | mAOE | moving mAP | moving mATE | moving mAVE | prediction-only mAP |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.variant,
            r.runs,
            cell(&r.map),
            cell(&r.mate),
            cell(&r.mave),
            cell(&r.maoe),
            cell(&r.moving_map),
            cell(&r.moving_mate),
            cell(&r.moving_mave),
            r.prediction_only_map.as_ref().map_or_else(|| "-".to_string(), cell),
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of mean mAP per variant with ±std whiskers.
pub fn svg_bar_chart(title: &str, rows: &[AggregateRow]) -> String {
    let (bar, gap, left, top, height) = (48.0, 24.0, 56.0, 40.0, 240.0);
    let width = left + rows.len() as f64 * (bar + gap) + gap;
    let total_h = top + height + 90.0;
    let y = |v: f64| top + height * (1.0 - v.clamp(0.0, 1.0));
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{total_h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" x2="{width:.0}" y1="{0:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{1}" y="{2:.1}" text-anchor="end">{v:.1}</text>"##,
            y(v),
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let mean = if r.map.mean.is_finite() { r.map.mean } else { 0.0 };
        let std = if r.map.std.is_finite() { r.map.std } else { 0.0 };
        let cx = x + bar / 2.0;
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{:.1}" fill="#4a7ab5"/>"##,
            y(mean),
            y(0.0) - y(mean)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="#222"/>"##,
            y(mean + std),
            y(mean - std)
        );
        let _ = writeln!(svg, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{mean:.3}</text>"#, y(mean) - 6.0);
        let ly = top + height + 14.0;
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-35 {cx:.1} {ly:.1})">{}</text>"#,
            escape(&r.variant)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `summary.json`, `table.md` and `map.svg` into `dir`.
pub fn write_table_outputs(dir: &Path, table: &AblationTable) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("summary.json"), table)?;
    std::fs::write(dir.join("table.md"), markdown_table(&table.rows))?;
    let title = match table.suite {
        Some(s) => format!("mAP by variant ({s})"),
        None => "mAP by variant".to_string(),
    };
    std::fs::write(dir.join("map.svg"), svg_bar_chart(&title, &table.rows))?;
    Ok(())
}
