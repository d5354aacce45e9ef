//! Domain types shared by parsing, scoring, and orchestration.
//!
//! Everything here is an immutable value once constructed. Constructors
//! enforce the invariants; serde deserialization goes through the same
//! constructors, so a value that exists is a valid value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// NFC-normalizes, collapses internal whitespace runs to one space, and trims.
/// Case is preserved.
pub fn normalize_mention(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "EE")]
    Ee,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ner, Task::Re, Task::Ee];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ner => "NER",
            Task::Re => "RE",
            Task::Ee => "EE",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NER" => Ok(Task::Ner),
            "RE" => Ok(Task::Re),
            "EE" => Ok(Task::Ee),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The three modalities a grounding can point into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingModality {
    Image,
    Audio,
    Video,
}

impl GroundingModality {
    pub const ALL: [GroundingModality; 3] = [
        GroundingModality::Image,
        GroundingModality::Audio,
        GroundingModality::Video,
    ];

    pub fn modality(self) -> Modality {
        match self {
            GroundingModality::Image => Modality::Image,
            GroundingModality::Audio => Modality::Audio,
            GroundingModality::Video => Modality::Video,
        }
    }
}

/// One of the nine input combinations of the benchmark grid.
///
/// Variants are declared in report order, so `Ord` sorts the way tables
/// are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityCombo {
    #[serde(rename = "T+I")]
    TextImage,
    #[serde(rename = "I")]
    Image,
    #[serde(rename = "T+A")]
    TextAudio,
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "T+V")]
    TextVideo,
    #[serde(rename = "V")]
    Video,
    #[serde(rename = "T+I+A")]
    TextImageAudio,
    #[serde(rename = "I+A")]
    ImageAudio,
    #[serde(rename = "V+A")]
    VideoAudio,
}

impl ModalityCombo {
    pub const ALL: [ModalityCombo; 9] = [
        ModalityCombo::TextImage,
        ModalityCombo::Image,
        ModalityCombo::TextAudio,
        ModalityCombo::Audio,
        ModalityCombo::TextVideo,
        ModalityCombo::Video,
        ModalityCombo::TextImageAudio,
        ModalityCombo::ImageAudio,
        ModalityCombo::VideoAudio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityCombo::TextImage => "T+I",
            ModalityCombo::Image => "I",
            ModalityCombo::TextAudio => "T+A",
            ModalityCombo::Audio => "A",
            ModalityCombo::TextVideo => "T+V",
            ModalityCombo::Video => "V",
            ModalityCombo::TextImageAudio => "T+I+A",
            ModalityCombo::ImageAudio => "I+A",
            ModalityCombo::VideoAudio => "V+A",
        }
    }

    pub fn modalities(self) -> BTreeSet<Modality> {
        self.as_str()
            .split('+')
            .map(|m| match m {
                "T" => Modality::Text,
                "I" => Modality::Image,
                "A" => Modality::Audio,
                _ => Modality::Video,
            })
            .collect()
    }

    /// The combo whose modality set is exactly `set`, if any.
    pub fn from_modalities(set: &BTreeSet<Modality>) -> Option<ModalityCombo> {
        Self::ALL.into_iter().find(|c| &c.modalities() == set)
    }

    pub fn grounding_modalities(self) -> Vec<GroundingModality> {
        let mods = self.modalities();
        GroundingModality::ALL
            .into_iter()
            .filter(|g| mods.contains(&g.modality()))
            .collect()
    }
}

impl fmt::Display for ModalityCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown modality combination `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Shared,
    Specific,
}

impl Alignment {
    pub fn as_str(self) -> &'static str {
        match self {
            Alignment::Shared => "shared",
            Alignment::Specific => "specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRef {
    pub path: PathBuf,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRef {
    pub path: PathBuf,
    pub frame_count: u32,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
}

/// One test instance's inputs. Media are referenced, never embedded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityBundle {
    instance_id: String,
    text: Option<String>,
    image: Option<ImageRef>,
    audio: Option<AudioRef>,
    video: Option<VideoRef>,
    alignment: Alignment,
}

impl ModalityBundle {
    pub fn new(
        instance_id: impl Into<String>,
        text: Option<String>,
        image: Option<ImageRef>,
        audio: Option<AudioRef>,
        video: Option<VideoRef>,
        alignment: Alignment,
    ) -> Result<Self> {
        let instance_id = instance_id.into();
        if instance_id.is_empty() {
            return Err(Error::invalid("instance_id must be non-empty"));
        }
        if text.is_none() && image.is_none() && audio.is_none() && video.is_none() {
            return Err(Error::invalid(format!(
                "instance `{instance_id}` has no modality"
            )));
        }
        if let Some(img) = &image {
            if img.width == 0 || img.height == 0 {
                return Err(Error::invalid("image dimensions must be positive"));
            }
        }
        if let Some(aud) = &audio {
            if !(aud.duration.is_finite() && aud.duration > 0.0) {
                return Err(Error::invalid("audio duration must be positive"));
            }
        }
        if let Some(vid) = &video {
            if vid.width == 0 || vid.height == 0 || vid.frame_count == 0 {
                return Err(Error::invalid("video dimensions must be positive"));
            }
            if !(vid.fps.is_finite() && vid.fps > 0.0) {
                return Err(Error::invalid("video fps must be positive"));
            }
        }
        Ok(Self {
            instance_id,
            text,
            image,
            audio,
            video,
            alignment,
        })
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }
    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }
    pub fn image(&self) -> Option<&ImageRef> {
        self.image.as_ref()
    }
    pub fn audio(&self) -> Option<&AudioRef> {
        self.audio.as_ref()
    }
    pub fn video(&self) -> Option<&VideoRef> {
        self.video.as_ref()
    }
    pub fn alignment(&self) -> Alignment {
        self.alignment
    }

    pub fn modalities(&self) -> BTreeSet<Modality> {
        let mut set = BTreeSet::new();
        if self.text.is_some() {
            set.insert(Modality::Text);
        }
        if self.image.is_some() {
            set.insert(Modality::Image);
        }
        if self.audio.is_some() {
            set.insert(Modality::Audio);
        }
        if self.video.is_some() {
            set.insert(Modality::Video);
        }
        set
    }

    /// Media path for a grounding modality, if that medium is present.
    pub fn media_path(&self, modality: GroundingModality) -> Option<&std::path::Path> {
        match modality {
            GroundingModality::Image => self.image.as_ref().map(|m| m.path.as_path()),
            GroundingModality::Audio => self.audio.as_ref().map(|m| m.path.as_path()),
            GroundingModality::Video => self.video.as_ref().map(|m| m.path.as_path()),
        }
    }
}

#[derive(Deserialize)]
struct RawImageMask {
    width: u32,
    height: u32,
    rle: Vec<u32>,
}

/// Uncompressed row-major run-length mask. Runs alternate background and
/// foreground, starting with background; the first run may be zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawImageMask")]
pub struct ImageMask {
    width: u32,
    height: u32,
    rle: Vec<u32>,
}

impl TryFrom<RawImageMask> for ImageMask {
    type Error = Error;

    fn try_from(raw: RawImageMask) -> Result<Self> {
        ImageMask::new(raw.width, raw.height, raw.rle)
    }
}

impl ImageMask {
    pub fn new(width: u32, height: u32, rle: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        let area = width as u64 * height as u64;
        let sum: u64 = rle.iter().map(|&r| r as u64).sum();
        if sum != area {
            return Err(Error::format(format!(
                "rle sums to {sum}, expected {width}x{height} = {area}"
            )));
        }
        Ok(Self { width, height, rle })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn rle(&self) -> &[u32] {
        &self.rle
    }
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// Number of foreground pixels.
    pub fn foreground(&self) -> u64 {
        self.rle.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// The unique canonical run list for the same pixels: interior zero runs
    /// are merged away and only a leading zero run may remain.
    pub fn canonical(&self) -> ImageMask {
        let mut runs: Vec<u32> = Vec::with_capacity(self.rle.len());
        // parity tracks which value the next pushed run carries
        let mut current_is_fg = false;
        for (i, &run) in self.rle.iter().enumerate() {
            let is_fg = i % 2 == 1;
            if run == 0 {
                continue;
            }
            if runs.is_empty() {
                if is_fg {
                    runs.push(0);
                }
                runs.push(run);
                current_is_fg = is_fg;
            } else if is_fg == current_is_fg {
                *runs.last_mut().expect("non-empty") += run;
            } else {
                runs.push(run);
                current_is_fg = is_fg;
            }
        }
        ImageMask {
            width: self.width,
            height: self.height,
            rle: runs,
        }
    }
}

#[derive(Deserialize)]
struct RawAudioSegment {
    start: f64,
    end: f64,
}

/// A half-open speech span in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAudioSegment")]
pub struct AudioSegment {
    start: f64,
    end: f64,
}

impl TryFrom<RawAudioSegment> for AudioSegment {
    type Error = Error;

    fn try_from(raw: RawAudioSegment) -> Result<Self> {
        AudioSegment::new(raw.start, raw.end)
    }
}

impl AudioSegment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start >= end {
            return Err(Error::invalid(format!(
                "audio segment [{start}, {end}] must satisfy 0 <= start < end"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }
    pub fn end(&self) -> f64 {
        self.end
    }
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Per-frame masks following one object through a video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<u32, ImageMask>",
    into = "BTreeMap<u32, ImageMask>"
)]
pub struct Tracklet {
    frames: BTreeMap<u32, ImageMask>,
}

impl TryFrom<BTreeMap<u32, ImageMask>> for Tracklet {
    type Error = Error;

    fn try_from(frames: BTreeMap<u32, ImageMask>) -> Result<Self> {
        Tracklet::new(frames)
    }
}

impl From<Tracklet> for BTreeMap<u32, ImageMask> {
    fn from(t: Tracklet) -> Self {
        t.frames
    }
}

impl Tracklet {
    pub fn new(frames: BTreeMap<u32, ImageMask>) -> Result<Self> {
        let mut dims = None;
        for mask in frames.values() {
            let d = (mask.width(), mask.height());
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::invalid(format!(
                        "tracklet frames disagree on size: {}x{} vs {}x{}",
                        prev.0, prev.1, d.0, d.1
                    )))
                }
                _ => {}
            }
        }
        if dims.is_none() {
            return Err(Error::invalid("tracklet must have at least one frame"));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &BTreeMap<u32, ImageMask> {
        &self.frames
    }

    pub fn dimensions(&self) -> (u32, u32) {
        let m = self.frames.values().next().expect("tracklet is non-empty");
        (m.width(), m.height())
    }

    pub fn max_frame(&self) -> u32 {
        *self
            .frames
            .keys()
            .next_back()
            .expect("tracklet is non-empty")
    }
}

/// A grounding payload tagged with the modality it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", content = "payload", rename_all = "lowercase")]
pub enum GroundingRef {
    Image(ImageMask),
    Audio(AudioSegment),
    Video(Tracklet),
}

impl GroundingRef {
    pub fn modality(&self) -> GroundingModality {
        match self {
            GroundingRef::Image(_) => GroundingModality::Image,
            GroundingRef::Audio(_) => GroundingModality::Audio,
            GroundingRef::Video(_) => GroundingModality::Video,
        }
    }
}

/// At most one grounding per modality per mention.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MentionGroundings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<AudioSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<Tracklet>,
}

impl MentionGroundings {
    pub fn is_empty(&self) -> bool {
        self.image.is_none() && self.audio.is_none() && self.video.is_none()
    }

    pub fn has(&self, modality: GroundingModality) -> bool {
        match modality {
            GroundingModality::Image => self.image.is_some(),
            GroundingModality::Audio => self.audio.is_some(),
            GroundingModality::Video => self.video.is_some(),
        }
    }

    /// Fills the slot for the payload's modality. Returns the payload back if
    /// the slot is already taken.
    pub fn attach(&mut self, grounding: GroundingRef) -> std::result::Result<(), GroundingRef> {
        if self.has(grounding.modality()) {
            return Err(grounding);
        }
        match grounding {
            GroundingRef::Image(m) => self.image = Some(m),
            GroundingRef::Audio(s) => self.audio = Some(s),
            GroundingRef::Video(t) => self.video = Some(t),
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = GroundingRef> + '_ {
        let image = self.image.clone().map(GroundingRef::Image);
        let audio = self.audio.map(GroundingRef::Audio);
        let video = self.video.clone().map(GroundingRef::Video);
        image.into_iter().chain(audio).chain(video)
    }
}

fn check_mention_text(what: &str, s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid(format!("{what} must be non-empty")));
    }
    if s.trim() != s {
        return Err(Error::invalid(format!(
            "{what} `{s}` has leading or trailing whitespace"
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawEntityMention {
    surface: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    groundings: MentionGroundings,
}

/// A textual entity with an optional label and per-modality groundings.
///
/// The label may be empty for relation arguments, whose output format
/// carries no entity type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEntityMention")]
pub struct EntityMention {
    surface: String,
    label: String,
    #[serde(default, skip_serializing_if = "MentionGroundings::is_empty")]
    pub groundings: MentionGroundings,
}

impl TryFrom<RawEntityMention> for EntityMention {
    type Error = Error;

    fn try_from(raw: RawEntityMention) -> Result<Self> {
        let mut m = EntityMention::new(raw.surface, raw.label)?;
        m.groundings = raw.groundings;
        Ok(m)
    }
}

impl EntityMention {
    pub fn new(surface: impl Into<String>, label: impl Into<String>) -> Result<Self> {
        let surface = surface.into();
        check_mention_text("entity surface", &surface)?;
        Ok(Self {
            surface,
            label: label.into(),
            groundings: MentionGroundings::default(),
        })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }
    pub fn label(&self) -> &str {
        &self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTriple {
    pub subject: EntityMention,
    pub relation: String,
    pub object: EntityMention,
}

#[derive(Deserialize)]
struct RawEventArgument {
    mention: String,
    role: String,
    #[serde(default)]
    groundings: MentionGroundings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEventArgument")]
pub struct EventArgument {
    mention: String,
    role: String,
    #[serde(default, skip_serializing_if = "MentionGroundings::is_empty")]
    pub groundings: MentionGroundings,
}

impl TryFrom<RawEventArgument> for EventArgument {
    type Error = Error;

    fn try_from(raw: RawEventArgument) -> Result<Self> {
        let mut a = EventArgument::new(raw.mention, raw.role)?;
        a.groundings = raw.groundings;
        Ok(a)
    }
}

impl EventArgument {
    pub fn new(mention: impl Into<String>, role: impl Into<String>) -> Result<Self> {
        let mention = mention.into();
        let role = role.into();
        check_mention_text("argument mention", &mention)?;
        check_mention_text("argument role", &role)?;
        Ok(Self {
            mention,
            role,
            groundings: MentionGroundings::default(),
        })
    }

    pub fn mention(&self) -> &str {
        &self.mention
    }
    pub fn role(&self) -> &str {
        &self.role
    }
}

#[derive(Deserialize)]
struct RawEventRecord {
    trigger: String,
    event_type: String,
    #[serde(default)]
    arguments: Vec<EventArgument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEventRecord")]
pub struct EventRecord {
    trigger: String,
    event_type: String,
    pub arguments: Vec<EventArgument>,
}

impl TryFrom<RawEventRecord> for EventRecord {
    type Error = Error;

    fn try_from(raw: RawEventRecord) -> Result<Self> {
        EventRecord::new(raw.trigger, raw.event_type, raw.arguments)
    }
}

impl EventRecord {
    pub fn new(
        trigger: impl Into<String>,
        event_type: impl Into<String>,
        arguments: Vec<EventArgument>,
    ) -> Result<Self> {
        let trigger = trigger.into();
        let event_type = event_type.into();
        check_mention_text("event trigger", &trigger)?;
        check_mention_text("event type", &event_type)?;
        Ok(Self {
            trigger,
            event_type,
            arguments,
        })
    }

    pub fn trigger(&self) -> &str {
        &self.trigger
    }
    pub fn event_type(&self) -> &str {
        &self.event_type
    }
}

/// Gold annotation or prediction for one instance. Duplicates are allowed
/// here and removed at scoring time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub instance_id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<EntityMention>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<RelationTriple>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventRecord>,
    /// Groundings not attached to any mention.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instance_groundings: Vec<GroundingRef>,
}

pub type GoldAnnotation = Annotation;
pub type PredictionSet = Annotation;

impl Annotation {
    pub fn empty(instance_id: impl Into<String>, task: Task) -> Self {
        Self {
            instance_id: instance_id.into(),
            task,
            entities: Vec::new(),
            relations: Vec::new(),
            events: Vec::new(),
            instance_groundings: Vec::new(),
        }
    }

    /// Checks that only the collection matching the task is populated.
    pub fn check_task_consistency(&self) -> Result<()> {
        let bad = match self.task {
            Task::Ner => !self.relations.is_empty() || !self.events.is_empty(),
            Task::Re => !self.entities.is_empty() || !self.events.is_empty(),
            Task::Ee => !self.entities.is_empty() || !self.relations.is_empty(),
        };
        if bad {
            return Err(Error::invalid(format!(
                "instance `{}`: collections inconsistent with task {}",
                self.instance_id, self.task
            )));
        }
        Ok(())
    }

    /// Every grounding in the instance, mention-attached first (in record
    /// order), then instance-level.
    pub fn all_groundings(&self) -> Vec<GroundingRef> {
        let mut out = Vec::new();
        for e in &self.entities {
            out.extend(e.groundings.iter());
        }
        for r in &self.relations {
            out.extend(r.subject.groundings.iter());
            out.extend(r.object.groundings.iter());
        }
        for ev in &self.events {
            for a in &ev.arguments {
                out.extend(a.groundings.iter());
            }
        }
        out.extend(self.instance_groundings.iter().cloned());
        out
    }

    pub fn image_masks(&self) -> Vec<ImageMask> {
        self.all_groundings()
            .into_iter()
            .filter_map(|g| match g {
                GroundingRef::Image(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    pub fn audio_segments(&self) -> Vec<AudioSegment> {
        self.all_groundings()
            .into_iter()
            .filter_map(|g| match g {
                GroundingRef::Audio(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    pub fn tracklets(&self) -> Vec<Tracklet> {
        self.all_groundings()
            .into_iter()
            .filter_map(|g| match g {
                GroundingRef::Video(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    /// Number of distinct textual entities (NER mentions, relation arguments,
    /// or event arguments) or grounding targets, whichever is larger.
    pub fn object_count(&self) -> usize {
        let mut mentions: BTreeSet<&str> = BTreeSet::new();
        for e in &self.entities {
            mentions.insert(e.surface());
        }
        for r in &self.relations {
            mentions.insert(r.subject.surface());
            mentions.insert(r.object.surface());
        }
        for ev in &self.events {
            for a in &ev.arguments {
                mentions.insert(a.mention());
            }
        }
        mentions.len().max(self.all_groundings().len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combos_parse_and_cover_modalities() {
        for c in ModalityCombo::ALL {
            assert_eq!(c.as_str().parse::<ModalityCombo>().unwrap(), c);
            assert_eq!(ModalityCombo::from_modalities(&c.modalities()), Some(c));
        }
        assert!("T".parse::<ModalityCombo>().is_err());
        assert_eq!(
            ModalityCombo::TextImageAudio.grounding_modalities(),
            vec![GroundingModality::Image, GroundingModality::Audio]
        );
        let json = serde_json::to_string(&ModalityCombo::VideoAudio).unwrap();
        assert_eq!(json, "\"V+A\"");
    }

    #[test]
    fn normalize_strips_and_collapses() {
        assert_eq!(normalize_mention("  Trump "), "Trump");
        assert_eq!(normalize_mention("New   York"), "New York");
        assert_eq!(normalize_mention("a\t\nb"), "a b");
        assert_eq!(normalize_mention("   "), "");
    }

    #[test]
    fn normalize_composes_to_nfc() {
        // U+0065 U+0301 composes to U+00E9 (UnicodeData.txt decomposition of U+00E9).
        let decomposed = "Cafe\u{0301}";
        assert_eq!(decomposed.chars().count(), 5);
        let out = normalize_mention(decomposed);
        assert_eq!(out, "Caf\u{00E9}");
        assert_eq!(out.chars().count(), 4);
    }

    #[test]
    fn normalize_preserves_case() {
        assert_eq!(normalize_mention("US"), "US");
        assert_ne!(normalize_mention("US"), normalize_mention("us"));
    }

    #[test]
    fn image_mask_rejects_bad_sum() {
        assert!(ImageMask::new(2, 2, vec![1, 2, 1]).is_ok());
        assert!(matches!(
            ImageMask::new(2, 2, vec![1, 1, 1]),
            Err(Error::Format(_))
        ));
        assert!(ImageMask::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn image_mask_canonical_merges_zero_runs() {
        let m = ImageMask::new(3, 2, vec![0, 2, 0, 1, 3]).unwrap();
        assert_eq!(m.canonical().rle(), &[0, 3, 3]);
        let bg = ImageMask::new(3, 3, vec![9]).unwrap();
        assert_eq!(bg.canonical().rle(), &[9]);
        let odd = ImageMask::new(2, 2, vec![1, 0, 1, 2]).unwrap();
        assert_eq!(odd.canonical().rle(), &[2, 2]);
        assert_eq!(odd.foreground(), 2);
    }

    #[test]
    fn audio_segment_invariants() {
        assert!(AudioSegment::new(0.0, 1.0).is_ok());
        assert!(AudioSegment::new(3.0, 2.0).is_err());
        assert!(AudioSegment::new(1.0, 1.0).is_err());
        assert!(AudioSegment::new(-0.5, 1.0).is_err());
        assert!(AudioSegment::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn tracklet_requires_consistent_nonempty_frames() {
        assert!(Tracklet::new(BTreeMap::new()).is_err());
        let mut frames = BTreeMap::new();
        frames.insert(0, ImageMask::new(2, 2, vec![4]).unwrap());
        frames.insert(3, ImageMask::new(2, 3, vec![6]).unwrap());
        assert!(Tracklet::new(frames).is_err());
    }

    #[test]
    fn bundle_requires_a_modality() {
        let err = ModalityBundle::new("x", None, None, None, None, Alignment::Shared);
        assert!(err.is_err());
        let ok = ModalityBundle::new(
            "x",
            Some("hello".into()),
            None,
            None,
            None,
            Alignment::Specific,
        )
        .unwrap();
        assert_eq!(ok.modalities().len(), 1);
        let bad_audio = ModalityBundle::new(
            "x",
            None,
            None,
            Some(AudioRef {
                path: "a.wav".into(),
                duration: 0.0,
            }),
            None,
            Alignment::Shared,
        );
        assert!(bad_audio.is_err());
    }

    #[test]
    fn mention_rejects_padding() {
        assert!(EntityMention::new(" Trump", "person").is_err());
        assert!(EntityMention::new("", "person").is_err());
        assert!(EventArgument::new("crowd", "").is_err());
        assert!(EventRecord::new("attack", "Attack", vec![]).is_ok());
    }

    #[test]
    fn grounding_ref_serializes_tagged() {
        let g = GroundingRef::Audio(AudioSegment::new(0.25, 1.5).unwrap());
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(
            json,
            r#"{"modality":"audio","payload":{"start":0.25,"end":1.5}}"#
        );
        let mask: std::result::Result<GroundingRef, _> = serde_json::from_str(
            r#"{"modality":"image","payload":{"width":2,"height":2,"rle":[1,1,1]}}"#,
        );
        assert!(mask.is_err());
    }

    #[test]
    fn mention_slots_hold_one_per_modality() {
        let mut slots = MentionGroundings::default();
        let seg = GroundingRef::Audio(AudioSegment::new(0.0, 1.0).unwrap());
        assert!(slots.attach(seg.clone()).is_ok());
        assert!(slots.attach(seg).is_err());
        assert!(slots
            .attach(GroundingRef::Image(
                ImageMask::new(1, 1, vec![0, 1]).unwrap()
            ))
            .is_ok());
        assert_eq!(slots.iter().count(), 2);
    }

    #[test]
    fn task_parse_rejects_unknown() {
        assert_eq!("ner".parse::<Task>().unwrap(), Task::Ner);
        assert!(matches!(
            "XYZ".parse::<Task>(),
            Err(Error::InvalidArgument(_))
        ));
    }
}
