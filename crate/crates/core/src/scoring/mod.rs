//! Per-instance metrics: micro-F1 counts for the extraction tasks and
//! matched-IoU scores for the three grounding modalities.

mod report;

pub use report::{
    aggregate, bucket_name, format_percent, render_report, AggregateOptions, Cell, ReportError,
    ReportFormat, ScoreReport, SplitKey, REPORT_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::{match_mask_sets, match_span_sets, match_tracklet_sets};
use crate::error::{Error, Result};
use crate::geometry::{
    mask_iou, rle_decode, span_iou_1d, tracklet_iou_profile, DenseMask, DEFAULT_EPSILON,
};
use crate::model::{
    Alignment, Annotation, AudioSegment, EntityMention, EventRecord, GroundingModality, ImageMask,
    ModalityCombo, RelationTriple, Task, Tracklet,
};

/// Precision, recall, and F1 from raw counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn combine(self, other: Prf) -> Prf {
        Prf::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

impl Default for Prf {
    fn default() -> Self {
        Prf::from_counts(0, 0, 0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Compare surfaces case-insensitively. Labels stay case-sensitive.
    #[serde(default)]
    pub case_insensitive: bool,
    /// Also require subject and object entity types to match in RE.
    #[serde(default)]
    pub strict_relations: bool,
}

impl MatchOptions {
    fn surface(&self, s: &str) -> String {
        if self.case_insensitive {
            s.to_lowercase()
        } else {
            s.to_string()
        }
    }
}

fn set_prf<T: Ord>(gold: BTreeSet<T>, pred: BTreeSet<T>) -> Prf {
    let tp = gold.intersection(&pred).count() as u64;
    Prf::from_counts(tp, pred.len() as u64 - tp, gold.len() as u64 - tp)
}

/// An entity counts when both surface and label match. Duplicates collapse.
pub fn score_ner(gold: &[EntityMention], pred: &[EntityMention], opts: MatchOptions) -> Prf {
    let key = |e: &EntityMention| (opts.surface(e.surface()), e.label().to_string());
    set_prf(
        gold.iter().map(key).collect(),
        pred.iter().map(key).collect(),
    )
}

/// A triple counts when subject, relation, and object match; entity types
/// only matter with `strict_relations`.
pub fn score_re(gold: &[RelationTriple], pred: &[RelationTriple], opts: MatchOptions) -> Prf {
    let key = |r: &RelationTriple| {
        let (sl, ol) = if opts.strict_relations {
            (r.subject.label().to_string(), r.object.label().to_string())
        } else {
            (String::new(), String::new())
        };
        (
            opts.surface(r.subject.surface()),
            sl,
            r.relation.clone(),
            opts.surface(r.object.surface()),
            ol,
        )
    };
    set_prf(
        gold.iter().map(key).collect(),
        pred.iter().map(key).collect(),
    )
}

pub fn score_event_trigger(gold: &[EventRecord], pred: &[EventRecord], opts: MatchOptions) -> Prf {
    let key = |e: &EventRecord| (opts.surface(e.trigger()), e.event_type().to_string());
    set_prf(
        gold.iter().map(key).collect(),
        pred.iter().map(key).collect(),
    )
}

/// An argument counts when its mention and role match a gold argument of an
/// event with the same type.
pub fn score_event_argument(gold: &[EventRecord], pred: &[EventRecord], opts: MatchOptions) -> Prf {
    let keys = |events: &[EventRecord]| -> BTreeSet<(String, String, String)> {
        events
            .iter()
            .flat_map(|e| {
                e.arguments.iter().map(move |a| {
                    (
                        e.event_type().to_string(),
                        a.role().to_string(),
                        opts.surface(a.mention()),
                    )
                })
            })
            .collect()
    };
    set_prf(keys(gold), keys(pred))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingKind {
    ImageMiou,
    VideoJaccard,
    AudioMiou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingScore {
    pub kind: GroundingKind,
    pub value: f64,
    pub matched_pairs: usize,
    pub unmatched_gold: usize,
    pub unmatched_pred: usize,
    /// Neither side had anything to ground; `value` is 1.0 by convention.
    pub vacuous: bool,
}

fn grounding_score(
    kind: GroundingKind,
    gold: usize,
    pred: usize,
    pair_scores: &[f64],
) -> GroundingScore {
    let denom = gold.max(pred);
    let value = if denom == 0 {
        1.0
    } else {
        (pair_scores.iter().sum::<f64>() / denom as f64).clamp(0.0, 1.0)
    };
    GroundingScore {
        kind,
        value,
        matched_pairs: pair_scores.len(),
        unmatched_gold: gold - pair_scores.len(),
        unmatched_pred: pred - pair_scores.len(),
        vacuous: denom == 0,
    }
}

/// Matched-mask mIoU: Σ IoU over matched pairs divided by max(G, K).
pub fn score_image_grounding(gold: &[ImageMask], pred: &[ImageMask]) -> Result<GroundingScore> {
    let g: Vec<DenseMask> = gold.iter().map(rle_decode).collect();
    let p: Vec<DenseMask> = pred.iter().map(rle_decode).collect();
    let matching = match_mask_sets(&g, &p, DEFAULT_EPSILON)?;
    let ious = matching
        .real_pairs()
        .map(|(gi, pi)| mask_iou(&g[gi], &p[pi]))
        .collect::<Result<Vec<_>>>()?;
    Ok(grounding_score(
        GroundingKind::ImageMiou,
        g.len(),
        p.len(),
        &ious,
    ))
}

/// Average Jaccard: frame-averaged IoU per matched tracklet pair, divided
/// by max(G, K).
pub fn score_video_tracking(gold: &[Tracklet], pred: &[Tracklet]) -> Result<GroundingScore> {
    let matching = match_tracklet_sets(gold, pred)?;
    let means = matching
        .real_pairs()
        .map(|(gi, pi)| tracklet_iou_profile(&gold[gi], &pred[pi]).map(|p| p.mean))
        .collect::<Result<Vec<_>>>()?;
    Ok(grounding_score(
        GroundingKind::VideoJaccard,
        gold.len(),
        pred.len(),
        &means,
    ))
}

pub fn score_audio_segmentation(gold: &[AudioSegment], pred: &[AudioSegment]) -> GroundingScore {
    let matching = match_span_sets(gold, pred);
    let ious: Vec<f64> = matching
        .real_pairs()
        .map(|(gi, pi)| span_iou_1d(&gold[gi], &pred[pi]))
        .collect();
    grounding_score(GroundingKind::AudioMiou, gold.len(), pred.len(), &ious)
}

/// A report column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "ET")]
    Et,
    #[serde(rename = "EA")]
    Ea,
    #[serde(rename = "I-Seg")]
    ImageSeg,
    #[serde(rename = "V-Trck")]
    VideoTrack,
    #[serde(rename = "A-Seg")]
    AudioSeg,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ner => "NER",
            Metric::Re => "RE",
            Metric::Et => "ET",
            Metric::Ea => "EA",
            Metric::ImageSeg => "I-Seg",
            Metric::VideoTrack => "V-Trck",
            Metric::AudioSeg => "A-Seg",
        }
    }

    pub fn is_grounding(self) -> bool {
        matches!(
            self,
            Metric::ImageSeg | Metric::VideoTrack | Metric::AudioSeg
        )
    }

    pub fn for_task(task: Task) -> &'static [Metric] {
        match task {
            Task::Ner => &[Metric::Ner],
            Task::Re => &[Metric::Re],
            Task::Ee => &[Metric::Et, Metric::Ea],
        }
    }

    pub fn for_grounding(modality: GroundingModality) -> Metric {
        match modality {
            GroundingModality::Image => Metric::ImageSeg,
            GroundingModality::Video => Metric::VideoTrack,
            GroundingModality::Audio => Metric::AudioSeg,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Metric::Ner,
            Metric::Re,
            Metric::Et,
            Metric::Ea,
            Metric::ImageSeg,
            Metric::VideoTrack,
            Metric::AudioSeg,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

/// Everything needed to place one instance's scores into report cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_id: String,
    pub dataset: String,
    pub combo: ModalityCombo,
    pub task: Task,
    pub alignment: Alignment,
    /// Gold entity/object count, used for the entity-count buckets.
    pub object_count: usize,
    pub extraction: BTreeMap<Metric, Prf>,
    pub grounding: BTreeMap<Metric, GroundingScore>,
}

/// Where an instance sits in the report grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMeta {
    pub instance_id: String,
    pub dataset: String,
    pub combo: ModalityCombo,
    pub alignment: Alignment,
}

/// Runs every scorer that applies to the instance's task and combo.
pub fn score_instance(
    meta: &InstanceMeta,
    gold: &Annotation,
    pred: &Annotation,
    opts: MatchOptions,
) -> Result<InstanceScore> {
    if gold.task != pred.task {
        return Err(Error::invalid(format!(
            "instance `{}`: gold task {} but prediction task {}",
            meta.instance_id, gold.task, pred.task
        )));
    }
    let mut extraction = BTreeMap::new();
    match gold.task {
        Task::Ner => {
            extraction.insert(Metric::Ner, score_ner(&gold.entities, &pred.entities, opts));
        }
        Task::Re => {
            extraction.insert(Metric::Re, score_re(&gold.relations, &pred.relations, opts));
        }
        Task::Ee => {
            extraction.insert(
                Metric::Et,
                score_event_trigger(&gold.events, &pred.events, opts),
            );
            extraction.insert(
                Metric::Ea,
                score_event_argument(&gold.events, &pred.events, opts),
            );
        }
    }
    let mut grounding = BTreeMap::new();
    for modality in meta.combo.grounding_modalities() {
        let score = match modality {
            GroundingModality::Image => {
                score_image_grounding(&gold.image_masks(), &pred.image_masks())?
            }
            GroundingModality::Video => score_video_tracking(&gold.tracklets(), &pred.tracklets())?,
            GroundingModality::Audio => {
                score_audio_segmentation(&gold.audio_segments(), &pred.audio_segments())
            }
        };
        grounding.insert(Metric::for_grounding(modality), score);
    }
    Ok(InstanceScore {
        instance_id: meta.instance_id.clone(),
        dataset: meta.dataset.clone(),
        combo: meta.combo,
        task: gold.task,
        alignment: meta.alignment,
        object_count: gold.object_count(),
        extraction,
        grounding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(s: &str, l: &str) -> EntityMention {
        EntityMention::new(s, l).unwrap()
    }

    #[test]
    fn prf_zero_denominators() {
        let p = Prf::from_counts(0, 0, 0);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ner_duplicates_do_not_inflate() {
        let gold = [ent("Trump", "person")];
        let pred = [ent("Trump", "person"), ent("Trump", "person")];
        let p = score_ner(&gold, &pred, MatchOptions::default());
        assert_eq!((p.tp, p.fp, p.fn_), (1, 0, 0));
    }

    #[test]
    fn case_insensitive_flag() {
        let gold = [ent("US", "country")];
        let pred = [ent("us", "country")];
        assert_eq!(score_ner(&gold, &pred, MatchOptions::default()).tp, 0);
        let opts = MatchOptions {
            case_insensitive: true,
            ..Default::default()
        };
        assert_eq!(score_ner(&gold, &pred, opts).tp, 1);
    }

    #[test]
    fn strict_relations_need_types() {
        let t = |sl: &str| RelationTriple {
            subject: ent("a", sl),
            relation: "peer".into(),
            object: ent("b", ""),
        };
        let lax = score_re(&[t("person")], &[t("")], MatchOptions::default());
        assert_eq!(lax.f1, 1.0);
        let strict = MatchOptions {
            strict_relations: true,
            ..Default::default()
        };
        assert_eq!(score_re(&[t("person")], &[t("")], strict).f1, 0.0);
    }

    #[test]
    fn vacuous_grounding() {
        let s = score_audio_segmentation(&[], &[]);
        assert!(s.vacuous);
        assert_eq!(s.value, 1.0);
        let s = score_audio_segmentation(&[AudioSegment::new(0.0, 1.0).unwrap()], &[]);
        assert!(!s.vacuous);
        assert_eq!((s.value, s.unmatched_gold), (0.0, 1));
    }
}
