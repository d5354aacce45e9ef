use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{InstanceScore, Metric, Prf};
use crate::error::{Error, Result};
use crate::model::{Alignment, ModalityCombo, Task};

pub const REPORT_VERSION: u32 = 1;

/// Entity-count bucket edges: 0, 1-2, 3-4, 5-6, 7+.
const BUCKETS: [(usize, Option<usize>, &str); 5] = [
    (0, Some(0), "entities=0"),
    (1, Some(2), "entities=1-2"),
    (3, Some(4), "entities=3-4"),
    (5, Some(6), "entities=5-6"),
    (7, None, "entities=7+"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitKey {
    All,
    Shared,
    Specific,
    EntityBuckets,
}

impl SplitKey {
    /// Parses a comma-separated list such as `shared,specific,entity-buckets`.
    pub fn parse_list(list: &str) -> Result<Vec<SplitKey>> {
        let mut keys: Vec<SplitKey> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        keys.sort();
        keys.dedup();
        Ok(keys)
    }

    fn splits_for(self, inst: &InstanceScore) -> Option<&'static str> {
        match self {
            SplitKey::All => Some("all"),
            SplitKey::Shared => (inst.alignment == Alignment::Shared).then_some("shared"),
            SplitKey::Specific => (inst.alignment == Alignment::Specific).then_some("specific"),
            SplitKey::EntityBuckets => Some(bucket_name(inst.object_count)),
        }
    }
}

impl FromStr for SplitKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SplitKey::All),
            "shared" => Ok(SplitKey::Shared),
            "specific" => Ok(SplitKey::Specific),
            "entity-buckets" => Ok(SplitKey::EntityBuckets),
            other => Err(Error::invalid(format!(
                "unknown split `{other}` (expected all, shared, specific, entity-buckets)"
            ))),
        }
    }
}

pub fn bucket_name(count: usize) -> &'static str {
    BUCKETS
        .iter()
        .find(|(lo, hi, _)| count >= *lo && hi.is_none_or(|h| count <= h))
        .map(|(_, _, name)| *name)
        .expect("buckets cover all counts")
}

fn split_rank(split: &str) -> usize {
    match split {
        "all" => 0,
        "shared" => 1,
        "specific" => 2,
        other => {
            3 + BUCKETS
                .iter()
                .position(|(_, _, n)| *n == other)
                .unwrap_or(BUCKETS.len())
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Leave vacuous grounding instances (nothing in gold or prediction)
    /// out of grounding means.
    #[serde(default)]
    pub exclude_vacuous: bool,
    /// Row label in table output.
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub split: String,
    pub combo: ModalityCombo,
    pub dataset: String,
    pub task: Task,
    pub metric: Metric,
    /// In [0, 1]; F1 for extraction metrics, mean score for grounding.
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Prf>,
    #[serde(default)]
    pub vacuous: usize,
    pub instances: Vec<String>,
}

impl Cell {
    fn sort_key(&self) -> (usize, ModalityCombo, Task, &str, Metric) {
        (
            split_rank(&self.split),
            self.combo,
            self.task,
            &self.dataset,
            self.metric,
        )
    }
}

/// An instance that failed somewhere upstream of scoring. It is still
/// scored with whatever it produced.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReportError {
    pub instance_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub report_version: u32,
    #[serde(default)]
    pub label: String,
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub errors: Vec<ReportError>,
}

impl ScoreReport {
    pub fn from_json(bytes: &[u8]) -> Result<ScoreReport> {
        let value: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::format(format!("report json: {e}")))?;
        match value.get("report_version").and_then(|v| v.as_u64()) {
            Some(v) if v == REPORT_VERSION as u64 => {}
            Some(v) => return Err(Error::format(format!("unsupported report_version {v}"))),
            None => return Err(Error::format("report_version is missing")),
        }
        serde_json::from_value(value).map_err(|e| Error::format(format!("report json: {e}")))
    }

    pub fn cell(
        &self,
        split: &str,
        combo: ModalityCombo,
        dataset: &str,
        metric: Metric,
    ) -> Option<&Cell> {
        self.cells.iter().find(|c| {
            c.split == split && c.combo == combo && c.dataset == dataset && c.metric == metric
        })
    }
}

#[derive(Default)]
struct Acc {
    prf: Option<Prf>,
    sum: f64,
    vacuous: usize,
    instances: Vec<String>,
}

/// Folds per-instance scores into report cells. Extraction cells sum counts
/// (micro-F1); grounding cells average instance values in instance-id order.
pub fn aggregate(
    instances: &[InstanceScore],
    splits: &[SplitKey],
    opts: &AggregateOptions,
) -> ScoreReport {
    let mut sorted: Vec<&InstanceScore> = instances.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    let mut keys = splits.to_vec();
    keys.sort();
    keys.dedup();

    type Key = (String, ModalityCombo, String, Task, Metric);
    let mut acc: BTreeMap<Key, Acc> = BTreeMap::new();
    for inst in sorted {
        for split in keys.iter().filter_map(|k| k.splits_for(inst)) {
            let key = |metric| {
                (
                    split.to_string(),
                    inst.combo,
                    inst.dataset.clone(),
                    inst.task,
                    metric,
                )
            };
            for (&metric, prf) in &inst.extraction {
                let a = acc.entry(key(metric)).or_default();
                a.prf = Some(a.prf.unwrap_or_default().combine(*prf));
                a.instances.push(inst.instance_id.clone());
            }
            for (&metric, score) in &inst.grounding {
                let a = acc.entry(key(metric)).or_default();
                if score.vacuous {
                    a.vacuous += 1;
                    if opts.exclude_vacuous {
                        continue;
                    }
                }
                a.sum += score.value;
                a.instances.push(inst.instance_id.clone());
            }
        }
    }

    let mut cells: Vec<Cell> = acc
        .into_iter()
        .filter(|(_, a)| !a.instances.is_empty())
        .map(|((split, combo, dataset, task, metric), a)| {
            let value = match a.prf {
                Some(prf) => prf.f1,
                None => (a.sum / a.instances.len() as f64).clamp(0.0, 1.0),
            };
            Cell {
                split,
                combo,
                dataset,
                task,
                metric,
                value,
                counts: a.prf,
                vacuous: a.vacuous,
                instances: a.instances,
            }
        })
        .collect();
    cells.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

    ScoreReport {
        report_version: REPORT_VERSION,
        label: opts.label.clone(),
        cells,
        errors: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

/// Percentage with one decimal: 0.474 -> "47.4".
pub fn format_percent(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

pub fn render_report(report: &ScoreReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Table => render_table(report).into_bytes(),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
            out.push(b'\n');
            out
        }
    }
}

fn render_table(report: &ScoreReport) -> String {
    let label = if report.label.is_empty() {
        "score"
    } else {
        &report.label
    };
    let mut blocks: BTreeMap<(usize, ModalityCombo), Vec<&Cell>> = BTreeMap::new();
    for cell in &report.cells {
        blocks
            .entry((split_rank(&cell.split), cell.combo))
            .or_default()
            .push(cell);
    }

    let mut out = String::new();
    for cells in blocks.values() {
        let first = cells[0];
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "split={} combo={}", first.split, first.combo);
        let mut rows = [
            vec!["dataset".to_string()],
            vec!["metric".to_string()],
            vec![label.to_string()],
        ];
        for cell in cells {
            rows[0].push(cell.dataset.clone());
            rows[1].push(cell.metric.to_string());
            rows[2].push(format_percent(cell.value));
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        for row in &rows {
            let mut line = String::new();
            for (i, field) in row.iter().enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                let _ = write!(line, "{field:<width$}", width = widths[i]);
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
    }
    out
}

fn render_csv(report: &ScoreReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "split",
        "combo",
        "dataset",
        "task",
        "metric",
        "value",
        "tp",
        "fp",
        "fn",
        "n_instances",
        "vacuous",
        "instances",
    ];
    w.write_record(header).expect("in-memory write");
    for c in &report.cells {
        let (tp, fp, fn_) = match c.counts {
            Some(p) => (p.tp.to_string(), p.fp.to_string(), p.fn_.to_string()),
            None => Default::default(),
        };
        w.write_record([
            c.split.clone(),
            c.combo.to_string(),
            c.dataset.clone(),
            c.task.to_string(),
            c.metric.to_string(),
            // Display prints the shortest string that parses back to the same f64
            c.value.to_string(),
            tp,
            fp,
            fn_,
            c.instances.len().to_string(),
            c.vacuous.to_string(),
            c.instances.join(";"),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::GroundingKind;
    use crate::scoring::GroundingScore;

    fn inst(id: &str, alignment: Alignment, counts: (u64, u64, u64), miou: f64) -> InstanceScore {
        let mut extraction = BTreeMap::new();
        extraction.insert(Metric::Ner, Prf::from_counts(counts.0, counts.1, counts.2));
        let mut grounding = BTreeMap::new();
        grounding.insert(
            Metric::ImageSeg,
            GroundingScore {
                kind: GroundingKind::ImageMiou,
                value: miou,
                matched_pairs: 1,
                unmatched_gold: 0,
                unmatched_pred: 0,
                vacuous: false,
            },
        );
        InstanceScore {
            instance_id: id.into(),
            dataset: "Twt17".into(),
            combo: ModalityCombo::TextImage,
            task: Task::Ner,
            alignment,
            object_count: 2,
            extraction,
            grounding,
        }
    }

    #[test]
    fn buckets() {
        let names: Vec<_> = [0, 1, 2, 3, 4, 5, 6, 7, 100]
            .iter()
            .map(|&n| bucket_name(n))
            .collect();
        assert_eq!(
            names,
            [
                "entities=0",
                "entities=1-2",
                "entities=1-2",
                "entities=3-4",
                "entities=3-4",
                "entities=5-6",
                "entities=5-6",
                "entities=7+",
                "entities=7+"
            ]
        );
    }

    #[test]
    fn unknown_split_rejected() {
        assert!(matches!(
            SplitKey::parse_list("shared,bogus"),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(
            SplitKey::parse_list("specific,shared,shared").unwrap(),
            vec![SplitKey::Shared, SplitKey::Specific]
        );
    }

    #[test]
    fn partition_and_permutation() {
        let a = inst("a", Alignment::Shared, (1, 0, 1), 0.25);
        let b = inst("b", Alignment::Specific, (1, 1, 0), 0.75);
        let splits = [SplitKey::All, SplitKey::Shared, SplitKey::Specific];
        let r1 = aggregate(
            &[a.clone(), b.clone()],
            &splits,
            &AggregateOptions::default(),
        );
        let r2 = aggregate(&[b, a], &splits, &AggregateOptions::default());
        assert_eq!(r1, r2);
        let all = r1
            .cell("all", ModalityCombo::TextImage, "Twt17", Metric::Ner)
            .unwrap();
        let shared = r1
            .cell("shared", ModalityCombo::TextImage, "Twt17", Metric::Ner)
            .unwrap();
        let specific = r1
            .cell("specific", ModalityCombo::TextImage, "Twt17", Metric::Ner)
            .unwrap();
        assert_eq!(
            shared.instances.len() + specific.instances.len(),
            all.instances.len()
        );
        let seg = r1
            .cell("all", ModalityCombo::TextImage, "Twt17", Metric::ImageSeg)
            .unwrap();
        assert_eq!(seg.value, 0.5);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let r = aggregate(
            &[inst("a", Alignment::Shared, (1, 2, 3), 1.0 / 3.0)],
            &[SplitKey::All],
            &AggregateOptions::default(),
        );
        let bytes = render_report(&r, ReportFormat::Json);
        assert_eq!(ScoreReport::from_json(&bytes).unwrap(), r);
        assert!(ScoreReport::from_json(br#"{"cells": []}"#).is_err());
        assert!(ScoreReport::from_json(br#"{"report_version": 9, "cells": []}"#).is_err());
    }

    #[test]
    fn csv_keeps_full_precision() {
        let r = aggregate(
            &[inst("a", Alignment::Shared, (1, 0, 0), 1.0 / 3.0)],
            &[SplitKey::All],
            &AggregateOptions::default(),
        );
        let csv = String::from_utf8(render_report(&r, ReportFormat::Csv)).unwrap();
        assert!(csv.contains(&(1.0f64 / 3.0).to_string()), "{csv}");
        assert!(csv.starts_with("split,combo,dataset,task,metric,value"));
    }
}
