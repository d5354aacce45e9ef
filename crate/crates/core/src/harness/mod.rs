//! End-to-end pipeline: prompt, UIE backend, meta-response parse, grounding
//! dispatch, linking, persistence, and scoring of stored runs.

pub mod backend;
pub mod protocol;
pub mod store;
pub mod stub;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use backend::{Backend, BackendError, FnBackend, HttpBackend, StdioBackend};
pub use store::{PredictionStore, StoreError};

use crate::corpus::{
    file_stem_for, file_to_annotation, load_gold, GoldFile, Manifest, ManifestEntry, Violation,
    ViolationCode,
};
use crate::error::{Error, Result};
use crate::metaresponse::{
    build_prompt, default_module_route, link_groundings, parse_meta_response, GroundingResult,
    ModuleCall, ParseWarning, PromptSpec,
};
use crate::model::{Annotation, GroundingModality, GroundingRef, PredictionSet, Task};
use crate::scoring::{
    aggregate, score_instance, AggregateOptions, InstanceMeta, MatchOptions, ReportError,
    ScoreReport, SplitKey,
};
use protocol::{Attachment, GroundingPayload, GroundingRequest, UieRequest, UieResponse};

pub const DEFAULT_NER_LABELS: [&str; 4] = ["person", "location", "organization", "country"];
pub const DEFAULT_RE_LABELS: [&str; 7] = [
    "peer",
    "award",
    "part_of",
    "locate_at",
    "nationality",
    "place_of_residence",
    "member_of",
];
pub const DEFAULT_EVENT_TYPES: [&str; 7] = [
    "Marry",
    "Attack",
    "Injure",
    "Be-born",
    "Meet",
    "Transport",
    "Start-position",
];
pub const DEFAULT_EVENT_ROLES: [&str; 8] = [
    "Agent",
    "Target",
    "Direction",
    "Time",
    "Place",
    "Instrument",
    "Organization",
    "Duration",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Uie,
    ImageSegmenter,
    VideoTracker,
    AudioSegmenter,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Uie => "uie",
            BackendKind::ImageSegmenter => "image_segmenter",
            BackendKind::VideoTracker => "video_tracker",
            BackendKind::AudioSegmenter => "audio_segmenter",
        }
    }

    pub fn grounding_modality(self) -> Option<GroundingModality> {
        match self {
            BackendKind::Uie => None,
            BackendKind::ImageSegmenter => Some(GroundingModality::Image),
            BackendKind::VideoTracker => Some(GroundingModality::Video),
            BackendKind::AudioSegmenter => Some(GroundingModality::Audio),
        }
    }

    pub fn for_modality(m: GroundingModality) -> BackendKind {
        match m {
            GroundingModality::Image => BackendKind::ImageSegmenter,
            GroundingModality::Video => BackendKind::VideoTracker,
            GroundingModality::Audio => BackendKind::AudioSegmenter,
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            BackendKind::Uie,
            BackendKind::ImageSegmenter,
            BackendKind::VideoTracker,
            BackendKind::AudioSegmenter,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown backend kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Stdio(Vec<String>),
    Http(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub transport: Transport,
    pub timeout: Duration,
    pub max_inflight: usize,
}

impl BackendSpec {
    /// Parses `kind=stdio:<command line>` or `kind=http(s)://...`.
    pub fn parse(spec: &str, timeout: Duration, max_inflight: usize) -> Result<Self> {
        if timeout.is_zero() {
            return Err(Error::invalid("backend timeout must be positive"));
        }
        if max_inflight == 0 {
            return Err(Error::invalid("max_inflight must be at least 1"));
        }
        let (kind, target) = spec
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("backend spec `{spec}` is not kind=target")))?;
        let kind: BackendKind = kind.trim().parse()?;
        let transport = if let Some(cmd) = target.strip_prefix("stdio:") {
            let argv = shlex::split(cmd)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| Error::invalid(format!("cannot split command `{cmd}`")))?;
            Transport::Stdio(argv)
        } else if target.starts_with("http://") || target.starts_with("https://") {
            Transport::Http(target.to_string())
        } else {
            return Err(Error::invalid(format!(
                "backend target `{target}` must start with stdio: or http(s)://"
            )));
        };
        Ok(Self {
            kind,
            transport,
            timeout,
            max_inflight,
        })
    }

    /// Starts the process or prepares the http client.
    pub fn connect(&self) -> std::io::Result<Arc<dyn Backend>> {
        Ok(match &self.transport {
            Transport::Stdio(argv) => Arc::new(StdioBackend::spawn(argv, self.max_inflight)?),
            Transport::Http(url) => Arc::new(HttpBackend::new(url.clone(), self.max_inflight)),
        })
    }
}

/// Connected backends for one run.
#[derive(Clone)]
pub struct Backends {
    pub uie: Arc<dyn Backend>,
    pub grounding: BTreeMap<GroundingModality, Arc<dyn Backend>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub jobs: usize,
    pub timeout: Duration,
    /// Extra attempts after a timeout or transport failure (0 or 1 is typical).
    pub retries: u32,
    /// Module name to grounding modality; defaults cover the three
    /// standard module names.
    pub module_routes: BTreeMap<String, GroundingModality>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let module_routes = ["Image Segmenter", "Video Tracker", "Audio Segmenter"]
            .into_iter()
            .map(|m| {
                (
                    m.to_string(),
                    default_module_route(m).expect("standard module"),
                )
            })
            .collect();
        Self {
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            timeout: Duration::from_secs(60),
            retries: 1,
            module_routes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunErrorCode {
    ParseError,
    Timeout,
    UnknownModule,
    MissingBackend,
    ModalityAbsent,
    BackendError,
    BadGrounding,
}

impl RunErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunErrorCode::ParseError => "PARSE_ERROR",
            RunErrorCode::Timeout => "TIMEOUT",
            RunErrorCode::UnknownModule => "UNKNOWN_MODULE",
            RunErrorCode::MissingBackend => "MISSING_BACKEND",
            RunErrorCode::ModalityAbsent => "MODALITY_ABSENT",
            RunErrorCode::BackendError => "BACKEND_ERROR",
            RunErrorCode::BadGrounding => "BAD_GROUNDING",
        }
    }
}

impl fmt::Display for RunErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunError {
    pub code: RunErrorCode,
    pub message: String,
}

/// Wall-clock milliseconds per stage. Stored apart from the record so that
/// records stay byte-identical across runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub uie_ms: f64,
    pub parse_ms: f64,
    pub grounding_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instance_id: String,
    pub task: Task,
    pub prompt: String,
    #[serde(default)]
    pub meta_response: Option<String>,
    #[serde(default)]
    pub warnings: Vec<ParseWarning>,
    #[serde(default)]
    pub module_calls: Vec<ModuleCall>,
    #[serde(default)]
    pub groundings: Vec<GroundingResult>,
    pub prediction: PredictionSet,
    #[serde(default)]
    pub error: Option<RunError>,
    #[serde(skip)]
    pub timings: StageTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

/// The prompt sent for an entry: task instructions, then the text if any.
pub fn prompt_for(entry: &ManifestEntry) -> Result<String> {
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let label_schema = entry
        .record
        .label_schema
        .clone()
        .unwrap_or_else(|| match entry.task {
            Task::Ner => owned(&DEFAULT_NER_LABELS),
            Task::Re => owned(&DEFAULT_RE_LABELS),
            Task::Ee => owned(&DEFAULT_EVENT_TYPES),
        });
    let argument_roles = match entry.task {
        Task::Ee => entry
            .record
            .roles
            .clone()
            .unwrap_or_else(|| owned(&DEFAULT_EVENT_ROLES)),
        _ => Vec::new(),
    };
    let spec = PromptSpec {
        task: entry.task,
        label_schema,
        argument_roles,
        modalities_present: entry.bundle.modalities(),
    };
    let prompt = build_prompt(&spec)?;
    Ok(match entry.bundle.text() {
        Some(text) => format!("{prompt} {text}"),
        None => prompt,
    })
}

fn call_with_retry(
    backend: &dyn Backend,
    request: &serde_json::Value,
    config: &RunConfig,
) -> std::result::Result<serde_json::Value, BackendError> {
    let mut attempt = 0;
    loop {
        match backend.call(request, config.timeout) {
            Err(BackendError::Timeout(_) | BackendError::Io(_)) if attempt < config.retries => {
                attempt += 1
            }
            other => return other,
        }
    }
}

fn backend_error(e: BackendError) -> RunError {
    let code = match e {
        BackendError::Timeout(_) => RunErrorCode::Timeout,
        _ => RunErrorCode::BackendError,
    };
    RunError {
        code,
        message: e.to_string(),
    }
}

fn check_against_bundle(
    g: &GroundingRef,
    entry: &ManifestEntry,
) -> std::result::Result<(), String> {
    let b = &entry.bundle;
    match g {
        GroundingRef::Image(m) => match b.image() {
            Some(img) if (m.width(), m.height()) == (img.width, img.height) => Ok(()),
            Some(img) => Err(format!(
                "mask is {}x{}, image is {}x{}",
                m.width(),
                m.height(),
                img.width,
                img.height
            )),
            None => Err("image mask for an instance without image".into()),
        },
        GroundingRef::Audio(s) => match b.audio() {
            Some(a) if s.end() <= a.duration => Ok(()),
            Some(a) => Err(format!(
                "segment ends at {} past duration {}",
                s.end(),
                a.duration
            )),
            None => Err("audio segment for an instance without audio".into()),
        },
        GroundingRef::Video(t) => match b.video() {
            Some(v) if t.dimensions() == (v.width, v.height) && t.max_frame() < v.frame_count => {
                Ok(())
            }
            Some(_) => Err("tracklet frames or dimensions do not fit the video".into()),
            None => Err("tracklet for an instance without video".into()),
        },
    }
}

/// Runs one instance through the pipeline. Never fails: problems are
/// recorded as a coded error on the record.
pub fn process_instance(
    entry: &ManifestEntry,
    backends: &Backends,
    config: &RunConfig,
) -> RunRecord {
    let start = Instant::now();
    let id = entry.instance_id().to_string();
    let mut record = RunRecord {
        instance_id: id.clone(),
        task: entry.task,
        prompt: String::new(),
        meta_response: None,
        warnings: Vec::new(),
        module_calls: Vec::new(),
        groundings: Vec::new(),
        prediction: Annotation::empty(&id, entry.task),
        error: None,
        timings: StageTimings::default(),
    };
    let finish = |mut r: RunRecord| {
        r.timings.total_ms = ms(start);
        r
    };

    record.prompt = match prompt_for(entry) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(RunError {
                code: RunErrorCode::BackendError,
                message: format!("cannot build prompt: {e}"),
            });
            return finish(record);
        }
    };

    let attachments: Vec<Attachment> = GroundingModality::ALL
        .into_iter()
        .filter_map(|m| {
            entry.bundle.media_path(m).map(|p| Attachment {
                modality: m.modality(),
                path: p.to_string_lossy().into_owned(),
            })
        })
        .collect();
    let request = UieRequest {
        id: id.clone(),
        prompt: record.prompt.clone(),
        attachments,
    };
    let t = Instant::now();
    let response = call_with_retry(
        backends.uie.as_ref(),
        &serde_json::to_value(&request).expect("request serializes"),
        config,
    );
    record.timings.uie_ms = ms(t);
    let text = match response.and_then(|v| {
        serde_json::from_value::<UieResponse>(v).map_err(|e| BackendError::Protocol(e.to_string()))
    }) {
        Ok(r) => r.text,
        Err(e) => {
            record.error = Some(backend_error(e));
            return finish(record);
        }
    };
    record.meta_response = Some(text.clone());

    let t = Instant::now();
    let meta = match parse_meta_response(&text, entry.task) {
        Ok(m) => m,
        Err(e) => {
            record.timings.parse_ms = ms(t);
            record.error = Some(RunError {
                code: RunErrorCode::ParseError,
                message: e.to_string(),
            });
            return finish(record);
        }
    };
    record.timings.parse_ms = ms(t);
    record.warnings = meta.warnings.clone();
    record.module_calls = meta.module_calls.clone();

    // Check every call can be routed before sending anything; a bad call
    // drops all grounding for the instance but keeps the UIE tuples.
    let t = Instant::now();
    let mut routes = Vec::with_capacity(meta.module_calls.len());
    let mut routing_error = None;
    for call in &meta.module_calls {
        let Some(&modality) = config.module_routes.get(&call.module) else {
            routing_error = Some(RunError {
                code: RunErrorCode::UnknownModule,
                message: format!("module `{}` has no route", call.module),
            });
            break;
        };
        let Some(backend) = backends.grounding.get(&modality) else {
            routing_error = Some(RunError {
                code: RunErrorCode::MissingBackend,
                message: format!(
                    "no {} backend for module `{}`",
                    BackendKind::for_modality(modality),
                    call.module
                ),
            });
            break;
        };
        let Some(path) = entry.bundle.media_path(modality) else {
            routing_error = Some(RunError {
                code: RunErrorCode::ModalityAbsent,
                message: format!(
                    "module `{}` needs {} input",
                    call.module,
                    modality.modality()
                ),
            });
            break;
        };
        routes.push((modality, backend, path));
    }

    let mut results = Vec::new();
    if routing_error.is_some() {
        record.error = routing_error;
    } else {
        for (k, (call, (modality, backend, path))) in
            meta.module_calls.iter().zip(routes).enumerate()
        {
            let request = GroundingRequest {
                id: format!("{id}#{k}"),
                module: call.module.clone(),
                instruction: call.instruction.clone(),
                source: Attachment {
                    modality: modality.modality(),
                    path: path.to_string_lossy().into_owned(),
                },
            };
            let response = call_with_retry(
                backend.as_ref(),
                &serde_json::to_value(&request).expect("request serializes"),
                config,
            );
            let payload = match response.and_then(|v| {
                serde_json::from_value::<GroundingPayload>(v)
                    .map_err(|e| BackendError::Protocol(e.to_string()))
            }) {
                Ok(p) => p,
                Err(e) => {
                    record.error.get_or_insert(backend_error(e));
                    continue;
                }
            };
            if payload.modality() != modality {
                record.error.get_or_insert(RunError {
                    code: RunErrorCode::BadGrounding,
                    message: format!("call {k} expected {} output", modality.modality()),
                });
                continue;
            }
            let groundings = match payload.into_groundings() {
                Ok(g) => g,
                Err(e) => {
                    record.error.get_or_insert(RunError {
                        code: RunErrorCode::BadGrounding,
                        message: format!("call {k}: {e}"),
                    });
                    continue;
                }
            };
            for g in groundings {
                match check_against_bundle(&g, entry) {
                    Ok(()) => results.push(GroundingResult {
                        call_index: k,
                        payload: g,
                    }),
                    Err(msg) => {
                        record.error.get_or_insert(RunError {
                            code: RunErrorCode::BadGrounding,
                            message: format!("call {k}: {msg}"),
                        });
                    }
                }
            }
        }
    }
    record.timings.grounding_ms = ms(t);

    record.prediction =
        link_groundings(&id, &meta, &results).expect("call indices come from the calls");
    record.groundings = results;
    finish(record)
}

/// Runs every manifest entry and writes the records to `store`. Workers pull
/// instances from a shared counter; a single writer persists finished
/// records. Returns the records in instance-id order.
pub fn run_pipeline(
    manifest: &Manifest,
    backends: &Backends,
    config: &RunConfig,
    store: &mut PredictionStore,
) -> std::result::Result<Vec<RunRecord>, StoreError> {
    let entries = &manifest.entries;
    let jobs = config.jobs.clamp(1, entries.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<RunRecord>();

    let written = std::thread::scope(|scope| {
        let writer = scope.spawn(move || -> std::result::Result<Vec<RunRecord>, StoreError> {
            let mut done = Vec::new();
            let mut first_error = None;
            for record in rx {
                if first_error.is_none() {
                    if let Err(e) = store.put(&record) {
                        first_error = Some(e);
                    }
                }
                done.push(record);
            }
            if let Some(e) = first_error {
                return Err(e);
            }
            store.finish()?;
            Ok(done)
        });
        for _ in 0..jobs {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(entry) = entries.get(i) else { break };
                let record = process_instance(entry, backends, config);
                if tx.send(record).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        writer.join().expect("writer thread")
    })?;

    let mut records = written;
    records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    pub match_options: MatchOptions,
    pub aggregate: AggregateOptions,
    pub splits: Vec<SplitKey>,
    pub jobs: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            match_options: MatchOptions::default(),
            aggregate: AggregateOptions::default(),
            splits: vec![SplitKey::All],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub report: ScoreReport,
    /// Gold or prediction problems that kept an instance out of the report.
    pub violations: Vec<Violation>,
}

/// Scores predictions against every manifest entry. Entries without a
/// prediction are scored as empty; predictions for unknown ids become
/// violations.
pub fn score_predictions(
    manifest: &Manifest,
    predictions: &BTreeMap<String, PredictionSet>,
    errors: Vec<ReportError>,
    config: &ScoreConfig,
) -> ScoreOutcome {
    let mut violations: Vec<Violation> = predictions
        .keys()
        .filter(|id| manifest.get(id).is_none())
        .map(|id| Violation {
            instance_id: id.clone(),
            code: ViolationCode::UnknownInstance,
            message: "prediction has no manifest entry".into(),
        })
        .collect();

    let per_entry = crate::parallel::map_indexed(&manifest.entries, config.jobs, |entry| {
        let id = entry.instance_id();
        let gold = load_gold(entry)?;
        let fallback;
        let pred = match predictions.get(id) {
            Some(p) if p.task == entry.task => p,
            Some(p) => {
                return Err(vec![Violation {
                    instance_id: id.to_string(),
                    code: ViolationCode::TaskMismatch,
                    message: format!(
                        "prediction task {} but manifest task {}",
                        p.task, entry.task
                    ),
                }])
            }
            None => {
                fallback = Annotation::empty(id, entry.task);
                &fallback
            }
        };
        let meta = InstanceMeta {
            instance_id: id.to_string(),
            dataset: entry.dataset.clone(),
            combo: entry.combo,
            alignment: entry.bundle.alignment(),
        };
        score_instance(&meta, &gold, pred, config.match_options).map_err(|e| {
            vec![Violation {
                instance_id: id.to_string(),
                code: ViolationCode::DimMismatch,
                message: e.to_string(),
            }]
        })
    });
    let mut scores = Vec::new();
    for r in per_entry {
        match r {
            Ok(s) => scores.push(s),
            Err(v) => violations.extend(v),
        }
    }
    violations.sort();

    let mut report = aggregate(&scores, &config.splits, &config.aggregate);
    let mut errors = errors;
    errors.sort();
    report.errors = errors;
    ScoreOutcome { report, violations }
}

/// Scores run records, carrying their coded errors into the report.
pub fn score_records(
    manifest: &Manifest,
    records: &[RunRecord],
    config: &ScoreConfig,
) -> ScoreOutcome {
    let predictions = records
        .iter()
        .map(|r| (r.instance_id.clone(), r.prediction.clone()))
        .collect();
    let errors = records
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| ReportError {
                instance_id: r.instance_id.clone(),
                code: e.code.to_string(),
                message: e.message.clone(),
            })
        })
        .collect();
    score_predictions(manifest, &predictions, errors, config)
}

/// Replays a persisted store; equals the report produced by the live run.
pub fn score_store(
    store: &PredictionStore,
    manifest: &Manifest,
    config: &ScoreConfig,
) -> std::result::Result<ScoreOutcome, StoreError> {
    let records = store.load_all()?;
    Ok(score_records(manifest, &records, config))
}

/// Reads externally produced predictions: one annotation file per instance,
/// named like the store's records (`<escaped id>.json`), in the gold format.
pub fn load_prediction_dir(
    dir: &Path,
    manifest: &Manifest,
) -> (BTreeMap<String, PredictionSet>, Vec<Violation>) {
    let mut preds = BTreeMap::new();
    let mut violations = Vec::new();
    let mut known = std::collections::HashSet::new();
    for entry in &manifest.entries {
        let stem = file_stem_for(entry.instance_id());
        known.insert(format!("{stem}.json"));
        let path = dir.join(format!("{stem}.json"));
        if !path.exists() {
            continue;
        }
        let parsed = std::fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice::<GoldFile>(&b).map_err(|e| e.to_string()));
        match parsed {
            Ok(file) => match file_to_annotation(&file, &entry.bundle, entry.task) {
                Ok(ann) => {
                    preds.insert(entry.instance_id().to_string(), ann);
                }
                Err(v) => violations.extend(v),
            },
            Err(message) => violations.push(Violation {
                instance_id: entry.instance_id().to_string(),
                code: ViolationCode::ParseError,
                message: format!("{}: {message}", path.display()),
            }),
        }
    }
    if let Ok(listing) = std::fs::read_dir(dir) {
        let mut extra: Vec<String> = listing
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json") && !known.contains(n))
            .collect();
        extra.sort();
        for name in extra {
            violations.push(Violation {
                instance_id: name.trim_end_matches(".json").to_string(),
                code: ViolationCode::UnknownInstance,
                message: "prediction file has no manifest entry".into(),
            });
        }
    }
    violations.sort();
    (preds, violations)
}
