//! Deterministic backends for tests and smoke runs: replay from a fixture,
//! answer perfectly from gold, or answer from gold with a fixed share of
//! items corrupted.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::protocol::{error_response, with_id, GroundingPayload};
use crate::corpus::{load_gold, Manifest, Violation};
use crate::geometry::{rle_encode, DenseMask};
use crate::metaresponse::{
    MetaResponse, ModuleCall, ParsedArgument, ParsedEntity, ParsedEvent, ParsedMention,
    ParsedRelation, UieRecords,
};
use crate::model::{
    GoldAnnotation, GroundingModality, GroundingRef, ImageMask, MentionGroundings, Task, Tracklet,
};

/// A request handler that always produces a response message.
pub trait Stub: Send + Sync {
    fn handle(&self, request: &Value) -> Value;
}

fn id_of(request: &Value) -> &str {
    request.get("id").and_then(Value::as_str).unwrap_or("")
}

/// Serves a stub over newline-delimited json until `input` closes.
pub fn serve_lines(
    stub: &dyn Stub,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Value>(&line) {
            Ok(req) => stub.handle(&req),
            Err(e) => error_response("", "BAD_REQUEST", &e.to_string()),
        };
        writeln!(output, "{response}")?;
        output.flush()?;
    }
    Ok(())
}

/// Replays canned response messages keyed by request id.
pub struct EchoStub {
    responses: HashMap<String, Value>,
}

impl EchoStub {
    /// Reads a json-lines fixture; each line is a full response message
    /// with an `id`.
    pub fn from_jsonl(text: &str) -> crate::Result<Self> {
        let mut responses = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(line)
                .map_err(|e| crate::Error::format(format!("fixture line {}: {e}", i + 1)))?;
            let id = v
                .get("id")
                .and_then(Value::as_str)
                .ok_or_else(|| crate::Error::format(format!("fixture line {} has no id", i + 1)))?
                .to_string();
            responses.insert(id, v);
        }
        Ok(Self { responses })
    }
}

impl Stub for EchoStub {
    fn handle(&self, request: &Value) -> Value {
        let id = id_of(request);
        self.responses
            .get(id)
            .cloned()
            .unwrap_or_else(|| error_response(id, "NOT_FOUND", "no canned response for this id"))
    }
}

/// Whether item `index` of `kind` in `instance` is corrupted at `percent`.
/// The draw is a hash, so the corrupted set at a lower percentage is always
/// a subset of the set at a higher one.
pub fn is_corrupted(instance: &str, kind: &str, index: usize, percent: f64) -> bool {
    let mut h = Sha256::new();
    h.update(instance.as_bytes());
    h.update([0]);
    h.update(kind.as_bytes());
    h.update([0]);
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let u = x as f64 / 18_446_744_073_709_551_616.0; // 2^64
    u * 100.0 < percent
}

const CORRUPT_SUFFIX: &str = "#corrupt";

fn module_for(m: GroundingModality) -> (&'static str, &'static str) {
    match m {
        GroundingModality::Image => ("Image Segmenter", "Segmentation"),
        GroundingModality::Video => ("Video Tracker", "Tracking"),
        GroundingModality::Audio => ("Audio Segmenter", "Speech segmentation"),
    }
}

fn quote(surface: &str) -> String {
    let pairs = [
        ('\'', '\''),
        ('"', '"'),
        ('\u{201C}', '\u{201D}'),
        ('\u{00AB}', '\u{00BB}'),
    ];
    let (o, c) = pairs
        .into_iter()
        .find(|(_, c)| !surface.contains(*c))
        .unwrap_or(('\'', '\''));
    format!("{o}{surface}{c}")
}

fn empty_like(g: &GroundingRef) -> Option<GroundingRef> {
    let blank =
        |m: &ImageMask| rle_encode(&DenseMask::zeros(m.width(), m.height()).expect("valid dims"));
    match g {
        GroundingRef::Image(m) => Some(GroundingRef::Image(blank(m))),
        GroundingRef::Video(t) => {
            let frames = t.frames().iter().map(|(&f, m)| (f, blank(m))).collect();
            Some(GroundingRef::Video(
                Tracklet::new(frames).expect("same frames"),
            ))
        }
        GroundingRef::Audio(_) => None,
    }
}

/// The response an oracle gives for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleAnswer {
    pub meta_response: String,
    /// One entry per module call: the payload to return, or `None` when the
    /// grounding was dropped.
    pub groundings: Vec<(GroundingModality, Option<GroundingRef>)>,
}

/// Renders gold as the meta-response a perfect model would produce, with
/// `percent` of records and groundings corrupted.
pub fn oracle_answer(gold: &GoldAnnotation, percent: f64) -> OracleAnswer {
    let id = gold.instance_id.as_str();
    let hit = |kind: &str, i: usize| is_corrupted(id, kind, i, percent);
    let corrupt = |kind: &str, i: usize, label: &str| {
        if hit(kind, i) {
            format!("{label}{CORRUPT_SUFFIX}")
        } else {
            label.to_string()
        }
    };

    let mut calls = Vec::new();
    let mut groundings = Vec::new();
    let mut add = |surface: Option<&str>, gs: Vec<GroundingRef>| {
        for g in gs {
            let modality = g.modality();
            let (module, verb) = module_for(modality);
            let instruction = match surface {
                Some(s) => format!("{verb}: {}", quote(s)),
                None => format!("{verb}: every annotated region"),
            };
            calls.push(ModuleCall {
                module: module.to_string(),
                instruction,
            });
            let index = groundings.len();
            let payload = if hit("grounding", index) {
                empty_like(&g)
            } else {
                Some(g)
            };
            groundings.push((modality, payload));
        }
    };
    let attached = |mg: &MentionGroundings| mg.iter().collect::<Vec<_>>();

    let records = match gold.task {
        Task::Ner => {
            let mut out = Vec::new();
            for (i, e) in gold.entities.iter().enumerate() {
                add(Some(e.surface()), attached(&e.groundings));
                out.push(ParsedEntity {
                    surface: e.surface().to_string(),
                    label: corrupt("ner", i, e.label()),
                    concept: !e.groundings.is_empty(),
                });
            }
            UieRecords::Entities(out)
        }
        Task::Re => {
            let mut out = Vec::new();
            for (i, r) in gold.relations.iter().enumerate() {
                add(Some(r.subject.surface()), attached(&r.subject.groundings));
                add(Some(r.object.surface()), attached(&r.object.groundings));
                out.push(ParsedRelation {
                    subject: ParsedMention {
                        surface: r.subject.surface().to_string(),
                        concept: !r.subject.groundings.is_empty(),
                    },
                    relation: corrupt("re", i, &r.relation),
                    object: ParsedMention {
                        surface: r.object.surface().to_string(),
                        concept: !r.object.groundings.is_empty(),
                    },
                });
            }
            UieRecords::Relations(out)
        }
        Task::Ee => {
            let mut out = Vec::new();
            for (i, ev) in gold.events.iter().enumerate() {
                let mut arguments = Vec::new();
                for a in &ev.arguments {
                    add(Some(a.mention()), attached(&a.groundings));
                    arguments.push(ParsedArgument {
                        role: a.role().to_string(),
                        mention: a.mention().to_string(),
                        concept: !a.groundings.is_empty(),
                    });
                }
                out.push(ParsedEvent {
                    trigger: ev.trigger().to_string(),
                    event_type: corrupt("ee", i, ev.event_type()),
                    arguments,
                });
            }
            UieRecords::Events(out)
        }
    };
    add(None, gold.instance_groundings.clone());

    let meta = MetaResponse::from_parts(gold.task, records, calls);
    OracleAnswer {
        meta_response: meta.render(),
        groundings,
    }
}

/// Answers from gold. With `percent > 0` it becomes the corrupt-k stub.
pub struct OracleStub {
    answers: HashMap<String, OracleAnswer>,
}

impl OracleStub {
    pub fn from_manifest(manifest: &Manifest, percent: f64) -> Result<Self, Vec<Violation>> {
        let mut answers = HashMap::new();
        let mut violations = Vec::new();
        for entry in &manifest.entries {
            match load_gold(entry) {
                Ok(gold) => {
                    answers.insert(
                        entry.instance_id().to_string(),
                        oracle_answer(&gold, percent),
                    );
                }
                Err(v) => violations.extend(v),
            }
        }
        if violations.is_empty() {
            Ok(Self { answers })
        } else {
            violations.sort();
            Err(violations)
        }
    }
}

impl Stub for OracleStub {
    fn handle(&self, request: &Value) -> Value {
        let id = id_of(request);
        if request.get("prompt").is_some() {
            return match self.answers.get(id) {
                Some(a) => serde_json::json!({ "id": id, "text": a.meta_response }),
                None => error_response(id, "NOT_FOUND", "unknown instance"),
            };
        }
        let Some((instance, k)) = id.rsplit_once('#') else {
            return error_response(id, "BAD_REQUEST", "grounding id must be <instance>#<call>");
        };
        let found = self
            .answers
            .get(instance)
            .zip(k.parse::<usize>().ok())
            .and_then(|(a, k)| a.groundings.get(k));
        match found {
            Some((modality, payload)) => {
                let items: Vec<GroundingRef> = payload.iter().cloned().collect();
                with_id(id, &GroundingPayload::from_groundings(*modality, &items))
            }
            None => error_response(id, "NOT_FOUND", "unknown grounding call"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metaresponse::parse_meta_response;
    use crate::model::EntityMention;

    #[test]
    fn corruption_sets_are_nested() {
        for i in 0..200 {
            let mut prev = false;
            for k in [0.0, 10.0, 25.0, 50.0, 75.0, 100.0] {
                let now = is_corrupted("inst", "ner", i, k);
                assert!(!prev || now, "item {i} uncorrupted at {k}");
                prev = now;
            }
            assert!(!is_corrupted("inst", "ner", i, 0.0));
            assert!(is_corrupted("inst", "ner", i, 100.0));
        }
    }

    #[test]
    fn oracle_round_trips_through_the_parser() {
        let mut gold = GoldAnnotation::empty("x", Task::Ner);
        let mut trump = EntityMention::new("Trump", "person").unwrap();
        trump
            .groundings
            .attach(GroundingRef::Image(
                ImageMask::new(2, 2, vec![1, 3]).unwrap(),
            ))
            .unwrap();
        gold.entities.push(trump);
        gold.entities
            .push(EntityMention::new("Washington, D.C.", "location").unwrap());
        let answer = oracle_answer(&gold, 0.0);
        let meta = parse_meta_response(&answer.meta_response, Task::Ner).unwrap();
        assert!(meta.warnings.is_empty());
        assert_eq!(meta.records.len(), 2);
        assert_eq!(meta.module_calls[0].instruction, "Segmentation: 'Trump'");
        assert_eq!(answer.groundings.len(), 1);

        let spoiled = oracle_answer(&gold, 100.0);
        assert!(spoiled.meta_response.contains("person#corrupt"));
        match &spoiled.groundings[0].1 {
            Some(GroundingRef::Image(m)) => assert_eq!(m.foreground(), 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn echo_stub_replays_by_id() {
        let stub = EchoStub::from_jsonl("{\"id\":\"a\",\"text\":\"<UIE>\"}\n\n").unwrap();
        assert_eq!(
            stub.handle(&serde_json::json!({"id": "a"}))["text"],
            "<UIE>"
        );
        assert_eq!(
            stub.handle(&serde_json::json!({"id": "b"}))["error"]["code"],
            "NOT_FOUND"
        );
        assert!(EchoStub::from_jsonl("{\"text\":1}").is_err());
    }
}
