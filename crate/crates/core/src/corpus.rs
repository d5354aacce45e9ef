//! Benchmark corpus on disk: a json-lines manifest plus one gold json file
//! per instance. The format is described in `docs/corpus-format.md`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    normalize_mention, Alignment, Annotation, AudioRef, AudioSegment, EntityMention, EventArgument,
    EventRecord, GoldAnnotation, GroundingModality, GroundingRef, ImageMask, ImageRef,
    MentionGroundings, ModalityBundle, ModalityCombo, RelationTriple, Task, Tracklet, VideoRef,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown modality combination `{value}`")]
    UnknownCombo { line: usize, value: String },
    #[error("line {line}: unknown task `{value}`")]
    UnknownTask { line: usize, value: String },
    #[error("duplicate instance_id `{id}` on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("line {line}: {message}")]
    InvalidEntry { line: usize, message: String },
    #[error("referenced files missing: {}", format_missing(.0))]
    MissingFiles(Vec<(usize, PathBuf)>),
}

fn format_missing(missing: &[(usize, PathBuf)]) -> String {
    missing
        .iter()
        .map(|(line, p)| format!("{} (line {line})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub corpus: String,
    #[serde(default)]
    pub version: String,
}

/// One manifest line exactly as written; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub modality_combo: String,
    pub task: String,
    pub alignment: Alignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<AudioRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<VideoRef>,
    pub gold: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_schema: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub record: ManifestRecord,
    pub line: usize,
    pub dataset: String,
    pub combo: ModalityCombo,
    pub task: Task,
    /// Media paths resolved against the manifest directory.
    pub bundle: ModalityBundle,
    pub gold_path: PathBuf,
}

impl ManifestEntry {
    pub fn instance_id(&self) -> &str {
        &self.record.instance_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    /// False when the file had no header line and one was synthesized.
    pub has_header: bool,
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn get(&self, instance_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.instance_id() == instance_id)
    }

    /// Canonical serialization: header line, then one compact line per entry.
    pub fn to_canonical(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&e.record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_manifest(&text, &base_dir, &stem)
}

/// Parses manifest text. `default_corpus` names the corpus when the file has
/// no header line.
pub fn parse_manifest(
    text: &str,
    base_dir: &Path,
    default_corpus: &str,
) -> Result<Manifest, ManifestError> {
    let mut warnings = Vec::new();
    let mut header: Option<ManifestHeader> = None;
    let mut entries = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut missing = Vec::new();
    let mut first_content = true;

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw_line).map_err(|e| ManifestError::Parse {
                line,
                message: e.to_string(),
            })?;
        let is_header = value.get("format_version").is_some() && value.get("instance_id").is_none();
        if is_header {
            if !first_content {
                return Err(ManifestError::Parse {
                    line,
                    message: "header must be the first line".into(),
                });
            }
            let h: ManifestHeader =
                serde_json::from_value(value).map_err(|e| ManifestError::Parse {
                    line,
                    message: e.to_string(),
                })?;
            if h.format_version != FORMAT_VERSION {
                return Err(ManifestError::Parse {
                    line,
                    message: format!("unsupported format_version {}", h.format_version),
                });
            }
            header = Some(h);
            first_content = false;
            continue;
        }
        first_content = false;

        let record: ManifestRecord =
            serde_json::from_value(value).map_err(|e| ManifestError::Parse {
                line,
                message: e.to_string(),
            })?;
        if let Some(first) = seen.insert(record.instance_id.clone(), line) {
            return Err(ManifestError::DuplicateId {
                id: record.instance_id,
                first,
                second: line,
            });
        }
        let combo: ModalityCombo =
            record
                .modality_combo
                .parse()
                .map_err(|_| ManifestError::UnknownCombo {
                    line,
                    value: record.modality_combo.clone(),
                })?;
        let task: Task = record
            .task
            .parse()
            .map_err(|_| ManifestError::UnknownTask {
                line,
                value: record.task.clone(),
            })?;
        let invalid = |message: String| ManifestError::InvalidEntry { line, message };

        let resolve = |p: &Path| base_dir.join(p);
        let image = record.image.clone().map(|mut i| {
            i.path = resolve(&i.path);
            i
        });
        let audio = record.audio.clone().map(|mut a| {
            a.path = resolve(&a.path);
            a
        });
        let video = record.video.clone().map(|mut v| {
            v.path = resolve(&v.path);
            v
        });
        let bundle = ModalityBundle::new(
            record.instance_id.clone(),
            record.text.clone(),
            image,
            audio,
            video,
            record.alignment,
        )
        .map_err(|e| invalid(e.to_string()))?;
        if bundle.modalities() != combo.modalities() {
            return Err(invalid(format!(
                "modality_combo {combo} does not match the media present ({})",
                bundle
                    .modalities()
                    .iter()
                    .map(|m| m.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        for labels in [&record.label_schema, &record.roles].into_iter().flatten() {
            if labels
                .iter()
                .any(|l| l.is_empty() || l.contains(',') || l.trim() != l)
            {
                return Err(invalid(
                    "labels must be non-empty, unpadded, and comma-free".into(),
                ));
            }
        }

        let gold_path = resolve(&record.gold);
        for m in GroundingModality::ALL {
            if let Some(p) = bundle.media_path(m) {
                if !p.exists() {
                    missing.push((line, p.to_path_buf()));
                }
            }
        }
        if !gold_path.exists() {
            missing.push((line, gold_path.clone()));
        }

        entries.push(ManifestEntry {
            dataset: record.dataset.clone().unwrap_or_default(),
            record,
            line,
            combo,
            task,
            bundle,
            gold_path,
        });
    }
    if !missing.is_empty() {
        return Err(ManifestError::MissingFiles(missing));
    }

    let has_header = header.is_some();
    let header = header.unwrap_or_else(|| {
        warnings.push(format!(
            "manifest has no header line; corpus name defaults to `{default_corpus}`"
        ));
        ManifestHeader {
            format_version: FORMAT_VERSION,
            corpus: default_corpus.to_string(),
            version: String::new(),
        }
    });
    for e in &mut entries {
        if e.dataset.is_empty() {
            e.dataset = header.corpus.clone();
        }
    }
    if entries.is_empty() {
        warnings.push("manifest has no entries".to_string());
    }
    Ok(Manifest {
        header,
        has_header,
        base_dir: base_dir.to_path_buf(),
        entries,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    FileNotFound,
    ParseError,
    UnsupportedVersion,
    IdMismatch,
    TaskMismatch,
    InvalidRecord,
    UnnormalizedMention,
    RleSumMismatch,
    DimMismatch,
    SegmentOutOfRange,
    FrameOutOfRange,
    ModalityAbsent,
    BadLinkIndex,
    DuplicateLink,
    UnknownInstance,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::FileNotFound => "FILE_NOT_FOUND",
            ViolationCode::ParseError => "PARSE_ERROR",
            ViolationCode::UnsupportedVersion => "UNSUPPORTED_VERSION",
            ViolationCode::IdMismatch => "ID_MISMATCH",
            ViolationCode::TaskMismatch => "TASK_MISMATCH",
            ViolationCode::InvalidRecord => "INVALID_RECORD",
            ViolationCode::UnnormalizedMention => "UNNORMALIZED_MENTION",
            ViolationCode::RleSumMismatch => "RLE_SUM_MISMATCH",
            ViolationCode::DimMismatch => "DIM_MISMATCH",
            ViolationCode::SegmentOutOfRange => "SEGMENT_OUT_OF_RANGE",
            ViolationCode::FrameOutOfRange => "FRAME_OUT_OF_RANGE",
            ViolationCode::ModalityAbsent => "MODALITY_ABSENT",
            ViolationCode::BadLinkIndex => "BAD_LINK_INDEX",
            ViolationCode::DuplicateLink => "DUPLICATE_LINK",
            ViolationCode::UnknownInstance => "UNKNOWN_INSTANCE",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub instance_id: String,
    pub code: ViolationCode,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] {}", self.instance_id, self.code, self.message)
    }
}

/// Which record a gold grounding belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldLink {
    pub record: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<RelationSide>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argument: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationSide {
    Subject,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEntity {
    pub surface: String,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldRelation {
    pub subject: GoldEntity,
    pub relation: String,
    pub object: GoldEntity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldArgument {
    pub mention: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEvent {
    pub trigger: String,
    pub event_type: String,
    #[serde(default)]
    pub arguments: Vec<GoldArgument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldMask {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<GoldLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSegment {
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<GoldLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFrameMask {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldTracklet {
    pub frames: BTreeMap<u32, RawFrameMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<GoldLink>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldGroundings {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image: Vec<GoldMask>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audio: Vec<GoldSegment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub video: Vec<GoldTracklet>,
}

impl GoldGroundings {
    fn is_empty(&self) -> bool {
        self.image.is_empty() && self.audio.is_empty() && self.video.is_empty()
    }
}

/// The on-disk annotation format. Predictions scored with `--pred` use the
/// same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldFile {
    pub format_version: u32,
    pub instance_id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<GoldEntity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<GoldRelation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<GoldEvent>,
    #[serde(default, skip_serializing_if = "GoldGroundings::is_empty")]
    pub groundings: GoldGroundings,
}

impl GoldFile {
    /// Canonical pretty json with a trailing newline.
    pub fn to_canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("gold serializes");
        s.push('\n');
        s
    }
}

/// Converts an annotation to the on-disk form, turning mention-attached
/// groundings into index links.
pub fn annotation_to_file(ann: &Annotation) -> GoldFile {
    let mut groundings = GoldGroundings::default();
    let mut push = |g: GroundingRef, link: Option<GoldLink>| match g {
        GroundingRef::Image(m) => groundings.image.push(GoldMask {
            width: m.width(),
            height: m.height(),
            rle: m.rle().to_vec(),
            link,
        }),
        GroundingRef::Audio(s) => groundings.audio.push(GoldSegment {
            start: s.start(),
            end: s.end(),
            link,
        }),
        GroundingRef::Video(t) => groundings.video.push(GoldTracklet {
            frames: t
                .frames()
                .iter()
                .map(|(&f, m)| {
                    (
                        f,
                        RawFrameMask {
                            width: m.width(),
                            height: m.height(),
                            rle: m.rle().to_vec(),
                        },
                    )
                })
                .collect(),
            link,
        }),
    };
    let link = |record, role, argument| {
        Some(GoldLink {
            record,
            role,
            argument,
        })
    };
    for (i, e) in ann.entities.iter().enumerate() {
        for g in e.groundings.iter() {
            push(g, link(i, None, None));
        }
    }
    for (i, r) in ann.relations.iter().enumerate() {
        for g in r.subject.groundings.iter() {
            push(g, link(i, Some(RelationSide::Subject), None));
        }
        for g in r.object.groundings.iter() {
            push(g, link(i, Some(RelationSide::Object), None));
        }
    }
    for (i, ev) in ann.events.iter().enumerate() {
        for (j, a) in ev.arguments.iter().enumerate() {
            for g in a.groundings.iter() {
                push(g, link(i, None, Some(j)));
            }
        }
    }
    for g in &ann.instance_groundings {
        push(g.clone(), None);
    }

    let entity = |m: &EntityMention| GoldEntity {
        surface: m.surface().to_string(),
        label: m.label().to_string(),
    };
    GoldFile {
        format_version: FORMAT_VERSION,
        instance_id: ann.instance_id.clone(),
        task: ann.task,
        entities: ann.entities.iter().map(entity).collect(),
        relations: ann
            .relations
            .iter()
            .map(|r| GoldRelation {
                subject: entity(&r.subject),
                relation: r.relation.clone(),
                object: entity(&r.object),
            })
            .collect(),
        events: ann
            .events
            .iter()
            .map(|e| GoldEvent {
                trigger: e.trigger().to_string(),
                event_type: e.event_type().to_string(),
                arguments: e
                    .arguments
                    .iter()
                    .map(|a| GoldArgument {
                        mention: a.mention().to_string(),
                        role: a.role().to_string(),
                    })
                    .collect(),
            })
            .collect(),
        groundings,
    }
}

struct Checker<'a> {
    instance_id: &'a str,
    violations: Vec<Violation>,
}

impl Checker<'_> {
    fn push(&mut self, code: ViolationCode, message: impl Into<String>) {
        self.violations.push(Violation {
            instance_id: self.instance_id.to_string(),
            code,
            message: message.into(),
        });
    }

    fn mention(&mut self, what: &str, s: &str) -> bool {
        if s.is_empty() {
            self.push(ViolationCode::InvalidRecord, format!("{what} is empty"));
            false
        } else if normalize_mention(s) != s {
            self.push(
                ViolationCode::UnnormalizedMention,
                format!("{what} `{s}` is not NFC with single spaces"),
            );
            false
        } else {
            true
        }
    }

    fn label(&mut self, what: &str, s: &str) -> bool {
        if s.is_empty() || normalize_mention(s) != s {
            self.push(
                ViolationCode::InvalidRecord,
                format!("{what} `{s}` is empty or not normalized"),
            );
            false
        } else {
            true
        }
    }

    fn mask(
        &mut self,
        what: &str,
        w: u32,
        h: u32,
        rle: &[u32],
        expect: (u32, u32),
    ) -> Option<ImageMask> {
        if (w, h) != expect {
            self.push(
                ViolationCode::DimMismatch,
                format!("{what} is {w}x{h}, media is {}x{}", expect.0, expect.1),
            );
            return None;
        }
        match ImageMask::new(w, h, rle.to_vec()) {
            Ok(m) => Some(m),
            Err(e) => {
                self.push(ViolationCode::RleSumMismatch, format!("{what}: {e}"));
                None
            }
        }
    }
}

/// Checks a parsed annotation file against its manifest entry and builds
/// the typed annotation. Every problem is reported; nothing is coerced.
pub fn file_to_annotation(
    file: &GoldFile,
    bundle: &ModalityBundle,
    task: Task,
) -> Result<GoldAnnotation, Vec<Violation>> {
    let mut ck = Checker {
        instance_id: bundle.instance_id(),
        violations: Vec::new(),
    };
    if file.format_version != FORMAT_VERSION {
        ck.push(
            ViolationCode::UnsupportedVersion,
            format!(
                "format_version {} (expected {FORMAT_VERSION})",
                file.format_version
            ),
        );
    }
    if file.instance_id != bundle.instance_id() {
        ck.push(
            ViolationCode::IdMismatch,
            format!("file says `{}`", file.instance_id),
        );
    }
    if file.task != task {
        ck.push(
            ViolationCode::TaskMismatch,
            format!("file task {} but manifest task {task}", file.task),
        );
    }
    let stray = match task {
        Task::Ner => !file.relations.is_empty() || !file.events.is_empty(),
        Task::Re => !file.entities.is_empty() || !file.events.is_empty(),
        Task::Ee => !file.entities.is_empty() || !file.relations.is_empty(),
    };
    if stray {
        ck.push(
            ViolationCode::TaskMismatch,
            format!("records present that do not belong to task {task}"),
        );
    }

    let mut ann = Annotation::empty(bundle.instance_id(), task);
    let mut records_ok = true;
    for (i, e) in file.entities.iter().enumerate() {
        let ok = ck.mention(&format!("entities[{i}].surface"), &e.surface)
            & ck.label(&format!("entities[{i}].label"), &e.label);
        records_ok &= ok;
        if ok {
            ann.entities
                .push(EntityMention::new(e.surface.clone(), e.label.clone()).expect("checked"));
        }
    }
    for (i, r) in file.relations.iter().enumerate() {
        let ok = ck.mention(&format!("relations[{i}].subject"), &r.subject.surface)
            & ck.mention(&format!("relations[{i}].object"), &r.object.surface)
            & ck.label(&format!("relations[{i}].relation"), &r.relation);
        records_ok &= ok;
        if ok {
            ann.relations.push(RelationTriple {
                subject: EntityMention::new(r.subject.surface.clone(), r.subject.label.clone())
                    .expect("checked"),
                relation: r.relation.clone(),
                object: EntityMention::new(r.object.surface.clone(), r.object.label.clone())
                    .expect("checked"),
            });
        }
    }
    for (i, ev) in file.events.iter().enumerate() {
        let mut ok = ck.mention(&format!("events[{i}].trigger"), &ev.trigger)
            & ck.label(&format!("events[{i}].event_type"), &ev.event_type);
        for (j, a) in ev.arguments.iter().enumerate() {
            ok &= ck.mention(&format!("events[{i}].arguments[{j}].mention"), &a.mention)
                & ck.label(&format!("events[{i}].arguments[{j}].role"), &a.role);
        }
        records_ok &= ok;
        if ok {
            let args = ev
                .arguments
                .iter()
                .map(|a| EventArgument::new(a.mention.clone(), a.role.clone()).expect("checked"))
                .collect();
            ann.events.push(
                EventRecord::new(ev.trigger.clone(), ev.event_type.clone(), args).expect("checked"),
            );
        }
    }

    let mut typed: Vec<(GroundingRef, &Option<GoldLink>, String)> = Vec::new();
    let g = &file.groundings;
    if !g.image.is_empty() {
        match bundle.image() {
            None => ck.push(
                ViolationCode::ModalityAbsent,
                "image groundings but no image",
            ),
            Some(img) => {
                for (i, m) in g.image.iter().enumerate() {
                    let what = format!("groundings.image[{i}]");
                    if let Some(mask) =
                        ck.mask(&what, m.width, m.height, &m.rle, (img.width, img.height))
                    {
                        typed.push((GroundingRef::Image(mask), &m.link, what));
                    }
                }
            }
        }
    }
    if !g.audio.is_empty() {
        match bundle.audio() {
            None => ck.push(
                ViolationCode::ModalityAbsent,
                "audio groundings but no audio",
            ),
            Some(aud) => {
                for (i, s) in g.audio.iter().enumerate() {
                    let what = format!("groundings.audio[{i}]");
                    match AudioSegment::new(s.start, s.end) {
                        Ok(seg) if seg.end() <= aud.duration => {
                            typed.push((GroundingRef::Audio(seg), &s.link, what))
                        }
                        Ok(_) => ck.push(
                            ViolationCode::SegmentOutOfRange,
                            format!("{what} ends at {} past duration {}", s.end, aud.duration),
                        ),
                        Err(e) => ck.push(ViolationCode::SegmentOutOfRange, format!("{what}: {e}")),
                    }
                }
            }
        }
    }
    if !g.video.is_empty() {
        match bundle.video() {
            None => ck.push(
                ViolationCode::ModalityAbsent,
                "video groundings but no video",
            ),
            Some(vid) => {
                for (i, t) in g.video.iter().enumerate() {
                    let what = format!("groundings.video[{i}]");
                    if t.frames.is_empty() {
                        ck.push(
                            ViolationCode::FrameOutOfRange,
                            format!("{what} has no frames"),
                        );
                        continue;
                    }
                    let mut frames = BTreeMap::new();
                    let mut ok = true;
                    for (&f, m) in &t.frames {
                        let fwhat = format!("{what}.frames[{f}]");
                        if f >= vid.frame_count {
                            ck.push(
                                ViolationCode::FrameOutOfRange,
                                format!("{fwhat} beyond frame_count {}", vid.frame_count),
                            );
                            ok = false;
                            continue;
                        }
                        match ck.mask(&fwhat, m.width, m.height, &m.rle, (vid.width, vid.height)) {
                            Some(mask) => {
                                frames.insert(f, mask);
                            }
                            None => ok = false,
                        }
                    }
                    if ok {
                        let tracklet = Tracklet::new(frames).expect("non-empty, uniform dims");
                        typed.push((GroundingRef::Video(tracklet), &t.link, what));
                    }
                }
            }
        }
    }

    for (grounding, link, what) in typed {
        let Some(link) = link else {
            ann.instance_groundings.push(grounding);
            continue;
        };
        if !records_ok {
            // record indices are meaningless once records were dropped
            continue;
        }
        let slot: Option<&mut MentionGroundings> = match (task, link.role, link.argument) {
            (Task::Ner, None, None) => ann.entities.get_mut(link.record).map(|e| &mut e.groundings),
            (Task::Re, Some(side), None) => {
                ann.relations.get_mut(link.record).map(|r| match side {
                    RelationSide::Subject => &mut r.subject.groundings,
                    RelationSide::Object => &mut r.object.groundings,
                })
            }
            (Task::Ee, None, Some(arg)) => ann
                .events
                .get_mut(link.record)
                .and_then(|e| e.arguments.get_mut(arg))
                .map(|a| &mut a.groundings),
            _ => {
                ck.push(
                    ViolationCode::BadLinkIndex,
                    format!("{what}: link shape does not fit task {task}"),
                );
                continue;
            }
        };
        match slot {
            None => ck.push(
                ViolationCode::BadLinkIndex,
                format!("{what}: link points past the record list"),
            ),
            Some(slot) => {
                if slot.attach(grounding).is_err() {
                    ck.push(
                        ViolationCode::DuplicateLink,
                        format!("{what}: mention already has a grounding of this modality"),
                    );
                }
            }
        }
    }

    if ck.violations.is_empty() {
        Ok(ann)
    } else {
        ck.violations.sort();
        Err(ck.violations)
    }
}

/// Reads and checks an annotation file (gold or external prediction).
pub fn load_annotation_file(
    path: &Path,
    bundle: &ModalityBundle,
    task: Task,
) -> Result<GoldAnnotation, Vec<Violation>> {
    let id = bundle.instance_id().to_string();
    let bytes = std::fs::read(path).map_err(|e| {
        vec![Violation {
            instance_id: id.clone(),
            code: ViolationCode::FileNotFound,
            message: format!("{}: {e}", path.display()),
        }]
    })?;
    let file: GoldFile = serde_json::from_slice(&bytes).map_err(|e| {
        vec![Violation {
            instance_id: id.clone(),
            code: ViolationCode::ParseError,
            message: format!("{}: {e}", path.display()),
        }]
    })?;
    file_to_annotation(&file, bundle, task)
}

pub fn load_gold(entry: &ManifestEntry) -> Result<GoldAnnotation, Vec<Violation>> {
    load_annotation_file(&entry.gold_path, &entry.bundle, entry.task)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub instances: usize,
    pub shared: usize,
    pub specific: usize,
    pub per_combo: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub summary: PartitionSummary,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Loads every gold file, collecting all violations. Output is sorted by
/// (instance_id, code) regardless of `jobs`.
pub fn validate_corpus(manifest: &Manifest, jobs: usize) -> ValidationReport {
    let per_entry =
        crate::parallel::map_indexed(&manifest.entries, jobs, |entry| match load_gold(entry) {
            Ok(_) => Vec::new(),
            Err(v) => v,
        });
    let mut violations: Vec<Violation> = per_entry.into_iter().flatten().collect();
    violations.sort();

    let mut summary = PartitionSummary {
        instances: manifest.entries.len(),
        ..Default::default()
    };
    for e in &manifest.entries {
        match e.bundle.alignment() {
            Alignment::Shared => summary.shared += 1,
            Alignment::Specific => summary.specific += 1,
        }
        *summary.per_combo.entry(e.combo.to_string()).or_default() += 1;
    }
    ValidationReport {
        violations,
        summary,
    }
}

/// File-name-safe form of an instance id. Bytes outside `[A-Za-z0-9._-]`
/// are percent-escaped, so distinct ids never collide.
pub fn file_stem_for(instance_id: &str) -> String {
    let mut out = String::with_capacity(instance_id.len());
    for b in instance_id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_') || (b == b'.' && !out.is_empty()) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}
