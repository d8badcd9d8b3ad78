use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TopKSweep;
use crate::error::{KdError, Result};
use crate::train::TrainLog;
use crate::util::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Real,
    Synthetic,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Real => "real",
            TargetKind::Synthetic => "synthetic",
        }
    }
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub data_size: usize,
    pub kind: TargetKind,
    pub domain: String,
    pub metric: String,
    pub value: f64,
    /// Decoding setup the value was produced with, e.g. `beam4`.
    pub decode: String,
}

impl MetricRecord {
    fn cell(&self) -> (&str, &str, usize, &str) {
        (&self.metric, &self.model, self.data_size, &self.domain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub model: String,
    pub data_size: usize,
    pub domain: String,
    pub metric: String,
    pub decode: String,
    pub real: f64,
    pub synthetic: f64,
    /// `synthetic − real`.
    pub delta: f64,
}

/// A two-column curve, written as `<name>.<label>.tsv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Everything known about one trained student.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub model: String,
    pub data_size: usize,
    pub kind: Option<TargetKind>,
    pub log: TrainLog,
    /// `(domain, metric, value, decode)` entries.
    pub values: Vec<(String, String, f64, String)>,
    pub topk: Option<TopKSweep>,
}

impl RunSummary {
    pub fn label(&self) -> String {
        let kind = self.kind.map_or("unknown", TargetKind::as_str);
        format!("{}_{}_{}", self.model, self.data_size, kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
    pub deltas: Vec<ReportDelta>,
    pub series: Vec<Series>,
    pub metadata: BTreeMap<String, String>,
}

/// Collects run metrics into sorted records, Synthetic − Real deltas and
/// plot series. Input order does not affect the result.
pub fn build_report(runs: &[RunSummary]) -> Result<EvalReport> {
    let mut records = Vec::new();
    let mut series = Vec::new();
    for run in runs {
        let kind = run
            .kind
            .ok_or_else(|| KdError::Report(format!("run {} has no target kind", run.label())))?;
        for (domain, metric, value, decode) in &run.values {
            records.push(MetricRecord {
                model: run.model.clone(),
                data_size: run.data_size,
                kind,
                domain: domain.clone(),
                metric: metric.clone(),
                value: *value,
                decode: decode.clone(),
            });
        }
        let label = run.label();
        if !run.log.steps.is_empty() {
            series.push(Series {
                name: "train_loss".into(),
                label: label.clone(),
                points: run.log.steps.iter().map(|s| (s.step as f64, s.loss)).collect(),
            });
        }
        if !run.log.evals.is_empty() {
            series.push(Series {
                name: "val_bleu".into(),
                label: label.clone(),
                points: run.log.evals.iter().map(|e| (e.step as f64, e.bleu)).collect(),
            });
        }
        if let Some(sweep) = &run.topk {
            series.push(Series {
                name: "topk_bleu".into(),
                label,
                points: sweep.points.iter().map(|p| (p.k as f64, p.mean)).collect(),
            });
        }
    }
    records.sort_by(|a, b| a.cell().cmp(&b.cell()).then(a.kind.cmp(&b.kind)));
    for w in records.windows(2) {
        if w[0].cell() == w[1].cell() && w[0].kind == w[1].kind {
            return Err(KdError::Report(format!(
                "duplicate record for {} {} {} {} {}",
                w[0].metric, w[0].model, w[0].data_size, w[0].kind, w[0].domain
            )));
        }
    }
    let mut labels = BTreeSet::new();
    for s in &series {
        if !labels.insert((s.name.clone(), s.label.clone())) {
            return Err(KdError::Report(format!("duplicate series {}.{}", s.name, s.label)));
        }
    }
    series.sort_by(|a, b| (&a.name, &a.label).cmp(&(&b.name, &b.label)));

    let mut deltas = Vec::new();
    for w in records.windows(2) {
        let (r, s) = (&w[0], &w[1]);
        if r.cell() == s.cell() && r.kind == TargetKind::Real && s.kind == TargetKind::Synthetic {
            if r.decode != s.decode {
                return Err(KdError::Report(format!(
                    "{} {} {}: real decoded with {} but synthetic with {}",
                    r.metric, r.model, r.data_size, r.decode, s.decode
                )));
            }
            deltas.push(ReportDelta {
                model: r.model.clone(),
                data_size: r.data_size,
                domain: r.domain.clone(),
                metric: r.metric.clone(),
                decode: r.decode.clone(),
                real: r.value,
                synthetic: s.value,
                delta: s.value - r.value,
            });
        }
    }
    Ok(EvalReport {
        records,
        deltas,
        series,
        metadata: BTreeMap::new(),
    })
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line<'a> {
    Record(&'a MetricRecord),
    Delta(&'a ReportDelta),
    Meta { key: &'a str, value: &'a str },
}

impl EvalReport {
    pub fn delta(&self, metric: &str, model: &str, data_size: usize, domain: &str) -> Option<&ReportDelta> {
        self.deltas
            .iter()
            .find(|d| d.metric == metric && d.model == model && d.data_size == data_size && d.domain == domain)
    }

    pub fn value(&self, metric: &str, model: &str, data_size: usize, kind: TargetKind, domain: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.metric == metric && r.model == model && r.data_size == data_size && r.kind == kind && r.domain == domain)
            .map(|r| r.value)
    }

    /// Aligned text table with one row per (metric, model, data, domain).
    pub fn render_table(&self) -> String {
        let header = ["metric", "model", "data", "domain", "decode", "Real", "Synthetic", "Δ"];
        let mut rows: Vec<[String; 8]> = Vec::new();
        let mut i = 0;
        while i < self.records.len() {
            let cell = self.records[i].cell();
            let mut j = i;
            while j < self.records.len() && self.records[j].cell() == cell {
                j += 1;
            }
            let group = &self.records[i..j];
            let get = |k: TargetKind| group.iter().find(|r| r.kind == k);
            let fmt = |r: Option<&MetricRecord>| r.map_or(String::new(), |r| format!("{:.2}", r.value));
            let (real, synth) = (get(TargetKind::Real), get(TargetKind::Synthetic));
            let delta = self
                .delta(cell.0, cell.1, cell.2, cell.3)
                .map_or(String::new(), |d| format!("{:+.2}", d.delta));
            let r0 = &group[0];
            rows.push([
                r0.metric.clone(),
                r0.model.clone(),
                r0.data_size.to_string(),
                r0.domain.clone(),
                r0.decode.clone(),
                fmt(real),
                fmt(synth),
                delta,
            ]);
            i = j;
        }
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    let pad = w - s.chars().count();
                    if c >= 5 {
                        format!("{}{s}", " ".repeat(pad))
                    } else {
                        format!("{s}{}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
        for r in &rows {
            line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out
    }

    /// Records, deltas and metadata as line-delimited JSON.
    pub fn to_jsonl(&self) -> String {
        let lines = self
            .records
            .iter()
            .map(Line::Record)
            .chain(self.deltas.iter().map(Line::Delta))
            .chain(self.metadata.iter().map(|(k, v)| Line::Meta { key: k, value: v }));
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `report.txt`, `records.jsonl` and `plots/<name>.<label>.tsv`
    /// under `dir`, returning the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let table = dir.join("report.txt");
        write_atomic(&table, self.render_table().as_bytes())?;
        written.push(table);
        let jsonl = dir.join("records.jsonl");
        write_atomic(&jsonl, self.to_jsonl().as_bytes())?;
        written.push(jsonl);
        for s in &self.series {
            let path = dir.join("plots").join(format!("{}.{}.tsv", s.name, s.label));
            let mut body = String::new();
            for (x, y) in &s.points {
                let _ = writeln!(body, "{x}\t{y}");
            }
            write_atomic(&path, body.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}
