use std::collections::BTreeMap;

use muie_core::model::{Alignment, ModalityCombo, Task};
use muie_core::scoring::{
    aggregate, format_percent, render_report, AggregateOptions, GroundingKind, GroundingScore,
    InstanceScore, Metric, Prf, ReportFormat, ScoreReport, SplitKey,
};

/// Reference row for a T+I block.
const ROW: [&str; 7] = ["47.4", "53.5", "24.6", "56.9", "30.2", "25.6", "60.1"];

const EXPECTED: &str = "\
split=all combo=T+I
dataset  Twt17  Twt17  MNRE  MNRE   M2E2  M2E2  M2E2
metric   NER    I-Seg  RE    I-Seg  ET    EA    I-Seg
model-a  47.4   53.5   24.6  56.9   30.2  25.6  60.1
";

fn grounding(kind: GroundingKind, value: f64) -> GroundingScore {
    GroundingScore {
        kind,
        value,
        matched_pairs: 1,
        unmatched_gold: 0,
        unmatched_pred: 0,
        vacuous: false,
    }
}

fn instance(
    id: &str,
    dataset: &str,
    task: Task,
    extraction: &[(Metric, Prf)],
    miou: f64,
) -> InstanceScore {
    InstanceScore {
        instance_id: id.into(),
        dataset: dataset.into(),
        combo: ModalityCombo::TextImage,
        task,
        alignment: Alignment::Shared,
        object_count: 1,
        extraction: extraction.iter().copied().collect(),
        grounding: BTreeMap::from([(Metric::ImageSeg, grounding(GroundingKind::ImageMiou, miou))]),
    }
}

/// Counts whose F1 = 2tp / (2tp + fp + fn) equals `permille / 1000`.
fn counts_for(permille: u64) -> Prf {
    assert_eq!(permille % 2, 0);
    let tp = permille / 2;
    let rest = 1000 - permille;
    Prf::from_counts(tp, rest / 2, rest - rest / 2)
}

#[test]
fn format_percent_one_decimal() {
    for (v, s) in [
        (0.474, "47.4"),
        (0.535, "53.5"),
        (1.0, "100.0"),
        (0.0, "0.0"),
    ] {
        assert_eq!(format_percent(v), s);
    }
}

#[test]
fn reference_row_through_aggregation() {
    let instances = vec![
        instance(
            "twt",
            "Twt17",
            Task::Ner,
            &[(Metric::Ner, counts_for(474))],
            0.535,
        ),
        instance(
            "mnre",
            "MNRE",
            Task::Re,
            &[(Metric::Re, counts_for(246))],
            0.569,
        ),
        instance(
            "m2e2",
            "M2E2",
            Task::Ee,
            &[(Metric::Et, counts_for(302)), (Metric::Ea, counts_for(256))],
            0.601,
        ),
    ];
    let report = aggregate(
        &instances,
        &[SplitKey::All],
        &AggregateOptions {
            exclude_vacuous: false,
            label: "model-a".into(),
        },
    );
    let table = String::from_utf8(render_report(&report, ReportFormat::Table)).unwrap();
    assert_eq!(table, EXPECTED);
    let score_row = table.lines().nth(3).unwrap();
    let cells: Vec<&str> = score_row.split_whitespace().skip(1).collect();
    assert_eq!(cells, ROW);
}

#[test]
fn reference_row_from_synthetic_cells() {
    let instances = vec![
        instance(
            "twt",
            "Twt17",
            Task::Ner,
            &[(Metric::Ner, counts_for(474))],
            0.535,
        ),
        instance(
            "mnre",
            "MNRE",
            Task::Re,
            &[(Metric::Re, counts_for(246))],
            0.569,
        ),
        instance(
            "m2e2",
            "M2E2",
            Task::Ee,
            &[(Metric::Et, counts_for(302)), (Metric::Ea, counts_for(256))],
            0.601,
        ),
    ];
    let mut report = aggregate(&instances, &[SplitKey::All], &AggregateOptions::default());
    report.label = "model-a".into();
    // overwrite with the literal table values
    for (cell, v) in report.cells.iter_mut().zip(ROW) {
        cell.value = v.parse::<f64>().unwrap() / 100.0;
    }
    let table = String::from_utf8(render_report(&report, ReportFormat::Table)).unwrap();
    assert_eq!(table, EXPECTED);
}

#[test]
fn json_round_trips_and_csv_has_one_row_per_cell() {
    let instances = vec![
        instance(
            "a",
            "Twt17",
            Task::Ner,
            &[(Metric::Ner, counts_for(474))],
            0.535,
        ),
        instance(
            "b",
            "Twt17",
            Task::Ner,
            &[(Metric::Ner, counts_for(600))],
            0.25,
        ),
    ];
    let report = aggregate(
        &instances,
        &[SplitKey::All, SplitKey::Shared],
        &AggregateOptions::default(),
    );
    let json = render_report(&report, ReportFormat::Json);
    let back = ScoreReport::from_json(&json).unwrap();
    assert_eq!(back, report);
    assert_eq!(render_report(&back, ReportFormat::Json), json);

    let csv = String::from_utf8(render_report(&report, ReportFormat::Csv)).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.cells.len());
    assert!(csv.starts_with(
        "split,combo,dataset,task,metric,value,tp,fp,fn,n_instances,vacuous,instances\n"
    ));
}

#[test]
fn rejects_other_report_versions() {
    assert!(ScoreReport::from_json(br#"{"report_version":2,"cells":[]}"#).is_err());
    assert!(ScoreReport::from_json(br#"{"cells":[]}"#).is_err());
}
