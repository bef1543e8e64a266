//! Run reports and the human-readable views of them: canonical JSON,
//! a Markdown leaderboard, SVG scatter and trace plots.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{AucResult, DatasetScore, Label, SkippedRecord, TraceToken};
use crate::scoring::{CodecConfig, DeltaRecord, Method};

/// Bump on any change to the report's fields or their meaning.
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub path: String,
    pub format: String,
    pub label: Option<Label>,
    pub n_samples: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAuc {
    pub method: Method,
    pub result: AucResult,
}

/// Fixed facts about how numbers in the report were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub nll_unit: String,
    pub skip_tokens_applies_to: String,
    pub baseline_aggregator: String,
    pub zlib: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            nll_unit: "nats".into(),
            skip_tokens_applies_to: "codec only; loss, mink and zlib use every scored target token".into(),
            baseline_aggregator: "arithmetic mean of per-sample scores".into(),
            zlib: "flate2 (miniz_oxide backend), zlib framing, level 6".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub tool: ToolInfo,
    pub command: String,
    /// Not covered by `config_hash`.
    pub timestamp: String,
    /// Provider description; never holds credentials.
    pub provider: Value,
    /// Effective run configuration after merging file and flags.
    pub config: Value,
    pub codec: CodecConfig,
    pub k_percent: f64,
    pub provenance: Provenance,
    pub datasets: Vec<DatasetInfo>,
    pub scores: Vec<DatasetScore>,
    pub auc: Vec<MethodAuc>,
    pub skipped: Vec<SkippedRecord>,
    pub config_hash: String,
}

impl AuditReport {
    /// Digest over every input that can change a number in the report.
    pub fn compute_config_hash(&self) -> String {
        digest_json(&json!({
            "schema_version": self.schema_version,
            "tool": self.tool,
            "command": self.command,
            "provider": self.provider,
            "config": self.config,
            "codec": self.codec,
            "k_percent": self.k_percent,
            "datasets": self.datasets,
        }))
    }

    pub fn seal(mut self) -> Self {
        self.config_hash = self.compute_config_hash();
        self
    }
}

/// Write through a temp file in the same directory and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// JSON with sorted keys, two-space indentation and every float written
/// with 17 significant digits.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out
}

fn write_value(out: &mut String, v: &Value, depth: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => {
            if n.is_u64() || n.is_i64() {
                out.push_str(&n.to_string());
            } else {
                let f = n.as_f64().expect("finite number");
                let _ = write!(out, "{f:.16e}");
            }
        }
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[*k], depth + 1);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
    }
}

/// Hex sha256 of the canonical form of `value`.
pub fn digest_json(value: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}

pub fn emit_json(report: &AuditReport) -> Result<Vec<u8>> {
    let v = serde_json::to_value(report)?;
    let mut s = canonical_json(&v);
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn parse_json(bytes: &[u8]) -> Result<AuditReport> {
    let report: AuditReport = serde_json::from_slice(bytes)?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::Serialization(format!(
            "report schema version {} is not supported (expected {SCHEMA_VERSION})",
            report.schema_version
        )));
    }
    Ok(report)
}

/// One JSON object per record, tagged with the run's hash.
pub fn emit_deltas_jsonl(dataset: &str, config_hash: &str, records: &[DeltaRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let mut v = serde_json::to_value(r)?;
        v["schema_version"] = json!(SCHEMA_VERSION);
        v["dataset"] = json!(dataset);
        v["config_hash"] = json!(config_hash);
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Models by datasets, CoDeC scores as integer percentages, "-" where a
/// pair has no CoDeC score.
pub fn emit_markdown_table(scores: &[DatasetScore], models: &[String], datasets: &[String]) -> String {
    let mut out = String::from("| Model |");
    for d in datasets {
        let _ = write!(out, " {} |", md_cell(d));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(datasets.len()));
    out.push('\n');
    for m in models {
        let _ = write!(out, "| {} |", md_cell(m));
        for d in datasets {
            let cell = scores
                .iter()
                .find(|s| s.method == Method::Codec && &s.model_id == m && &s.dataset_name == d)
                .map(|s| format!("{}", (s.value * 100.0).round() as i64))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && c != '\n' && c != '\t' => out.push('\u{FFFD}'),
            c => out.push(c),
        }
    }
    out
}

const SEEN_COLOR: &str = "#d62728";
const UNSEEN_COLOR: &str = "#1f77b4";

/// One circle per score on a shared value axis; seen in red on the top row,
/// unseen in blue below.
pub fn emit_scatter_svg(points: &[(DatasetScore, Label)]) -> String {
    let (w, h, left, right) = (640.0, 220.0, 60.0, 600.0);
    let method = points.first().map(|p| p.0.method).unwrap_or(Method::Codec);
    let (lo, hi) = if method == Method::Codec {
        (0.0, 1.0)
    } else {
        let lo = points.iter().map(|p| p.0.value).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.0.value).fold(f64::NEG_INFINITY, f64::max);
        if points.is_empty() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let x_of = |v: f64| left + (v - lo) / (hi - lo) * (right - left);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        "<style>.seen{{fill:{SEEN_COLOR}}}.unseen{{fill:{UNSEEN_COLOR}}}text{{font:12px sans-serif}}</style>"
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20">{} score by dataset</text>"#, method);
    let _ = writeln!(s, r#"<text x="{left}" y="60" class="seen">seen</text>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="130" class="unseen">unseen</text>"#);
    let axis_y = 180.0;
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{axis_y}" x2="{right}" y2="{axis_y}" stroke="black"/>"#
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let x = x_of(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{axis_y}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{v:.2}</text>"#,
            axis_y + 5.0,
            axis_y + 20.0
        );
    }
    let mut per_class = [0usize; 2];
    for (score, label) in points {
        let (class, base, k) = match label {
            Label::Seen => ("seen", 80.0, 0),
            Label::Unseen => ("unseen", 150.0, 1),
        };
        let y = base + ((per_class[k] % 5) as f64 - 2.0) * 6.0;
        per_class[k] += 1;
        let _ = writeln!(
            s,
            r#"<circle class="{class}" cx="{:.2}" cy="{y:.2}" r="5"><title>{} / {}: {:.4}</title></circle>"#,
            x_of(score.value),
            xml_escape(&score.model_id),
            xml_escape(&score.dataset_name),
            score.value
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar per aligned target token: height is the in-context logprob change,
/// skipped tokens in grey.
pub fn emit_trace_svg(trace: &[TraceToken], title: &str) -> String {
    let n = trace.len().max(1) as f64;
    let bar = 6.0;
    let (left, top, plot_h) = (40.0, 30.0, 200.0);
    let w = left * 2.0 + bar * n;
    let h = top + plot_h + 30.0;
    let zero = top + plot_h / 2.0;
    let peak = trace
        .iter()
        .filter_map(|t| t.delta)
        .map(f64::abs)
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { (plot_h / 2.0) / peak } else { 0.0 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(
        s,
        "<style>.up{{fill:#2ca02c}}.down{{fill:#d62728}}.skipped{{fill:#bbbbbb}}text{{font:12px sans-serif}}</style>"
    );
    let _ = writeln!(s, r#"<text x="{left}" y="18">{}</text>"#, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{zero}" x2="{:.0}" y2="{zero}" stroke="black"/>"#,
        w - left
    );
    for t in trace {
        let Some(d) = t.delta else { continue };
        let class = if t.skipped {
            "skipped"
        } else if d >= 0.0 {
            "up"
        } else {
            "down"
        };
        let x = left + bar * t.position as f64;
        let len = d.abs() * scale;
        let y = if d >= 0.0 { zero - len } else { zero };
        let _ = writeln!(
            s,
            r#"<rect class="{class}" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{len:.2}"><title>{} {}: {d:+.4}</title></rect>"#,
            bar - 1.0,
            t.position,
            xml_escape(&format!("{:?}", t.token_text))
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(model: &str, dataset: &str, value: f64) -> DatasetScore {
        DatasetScore {
            dataset_name: dataset.into(),
            model_id: model.into(),
            method: Method::Codec,
            value,
            oriented_value: value,
            n_samples_scored: 10,
            n_samples_skipped: 0,
            config_hash: "h".into(),
        }
    }

    fn report() -> AuditReport {
        AuditReport {
            schema_version: SCHEMA_VERSION,
            tool: ToolInfo::default(),
            command: "score".into(),
            timestamp: "1970-01-01T00:00:00Z".into(),
            provider: json!({"kind": "http", "endpoint": "http://x", "auth_env_var": "TOKEN_VAR"}),
            config: json!({"b": 1, "a": [0.1, 2.5e-300]}),
            codec: CodecConfig::default(),
            k_percent: 20.0,
            provenance: Provenance::default(),
            datasets: vec![],
            scores: vec![score("m", "d", 0.1 + 0.2), score("m", "e", 1.0 / 3.0)],
            auc: vec![MethodAuc {
                method: Method::Codec,
                result: AucResult { auc: 1.0, n_pos: 1, n_neg: 1, ties: 0 },
            }],
            skipped: vec![],
            config_hash: String::new(),
        }
        .seal()
    }

    #[test]
    fn json_round_trips_and_is_stable() {
        let r = report();
        let a = emit_json(&r).unwrap();
        assert_eq!(a, emit_json(&r).unwrap());
        assert!(a.ends_with(b"}\n"));
        assert_eq!(parse_json(&a).unwrap(), r);
    }

    #[test]
    fn canonical_form_sorts_keys_and_fixes_floats() {
        let v = json!({"z": 1, "a": {"y": 0.5, "b": [true, null]}, "m": -3});
        let s = canonical_json(&v);
        assert_eq!(
            s,
            "{\n  \"a\": {\n    \"b\": [\n      true,\n      null\n    ],\n    \"y\": 5.0000000000000000e-1\n  },\n  \"m\": -3,\n  \"z\": 1\n}"
        );
        let third: Value = serde_json::from_str(&canonical_json(&json!(1.0 / 3.0))).unwrap();
        assert_eq!(third.as_f64().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn hash_ignores_timestamp() {
        let mut r = report();
        let h = r.config_hash.clone();
        r.timestamp = "2030-01-01T00:00:00Z".into();
        assert_eq!(r.compute_config_hash(), h);
        r.codec.n_seeds = 3;
        assert_ne!(r.compute_config_hash(), h);
    }

    #[test]
    fn newer_schema_rejected() {
        let mut r = report();
        r.schema_version = SCHEMA_VERSION + 1;
        let bytes = emit_json(&r).unwrap();
        assert!(parse_json(&bytes).is_err());
    }

    #[test]
    fn markdown_cells() {
        let scores = vec![score("m1", "d1", 0.5), score("m2", "d2", 0.996)];
        let md = emit_markdown_table(
            &scores,
            &["m1".into(), "m2".into()],
            &["d1".into(), "d2".into(), "d3".into()],
        );
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "| Model | d1 | d2 | d3 |");
        assert_eq!(lines[2], "| m1 | 50 | - | - |");
        assert_eq!(lines[3], "| m2 | - | 100 | - |");
    }

    #[test]
    fn scatter_marks_and_determinism() {
        let pts: Vec<(DatasetScore, Label)> = (0..7)
            .map(|i| (score("m", &format!("d{i}"), i as f64 / 7.0), if i < 4 { Label::Seen } else { Label::Unseen }))
            .collect();
        let svg = emit_scatter_svg(&pts);
        assert_eq!(svg.matches("<circle").count(), 7);
        assert_eq!(svg.matches(r#"<circle class="seen""#).count(), 4);
        assert_eq!(svg, emit_scatter_svg(&pts));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

        let only_seen = emit_scatter_svg(&pts[..2]);
        assert_eq!(only_seen.matches("<circle").count(), 2);
        assert_eq!(emit_scatter_svg(&[]).matches("<circle").count(), 0);
    }

    #[test]
    fn trace_svg_one_bar_per_aligned_token() {
        let trace: Vec<TraceToken> = (0..5)
            .map(|i| TraceToken {
                position: i,
                token_text: "<&>".into(),
                delta: (i > 0).then_some(i as f64 - 2.5),
                skipped: i < 2,
            })
            .collect();
        let svg = emit_trace_svg(&trace, "t");
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(!svg.contains("<&>"));
    }
}
