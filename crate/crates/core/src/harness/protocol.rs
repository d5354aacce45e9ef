//! Wire messages exchanged with backends, one json object per line (stdio)
//! or per request body (http). See `docs/backend-protocol.md`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{AudioSegment, GroundingModality, GroundingRef, ImageMask, Modality, Tracklet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub modality: Modality,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UieRequest {
    pub id: String,
    pub prompt: String,
    pub attachments: Vec<Attachment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UieResponse {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingRequest {
    pub id: String,
    pub module: String,
    pub instruction: String,
    pub source: Attachment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMask {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
}

impl From<&ImageMask> for WireMask {
    fn from(m: &ImageMask) -> Self {
        WireMask {
            width: m.width(),
            height: m.height(),
            rle: m.rle().to_vec(),
        }
    }
}

/// The body of a successful grounding response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundingPayload {
    Masks {
        masks: Vec<WireMask>,
    },
    Segments {
        segments: Vec<[f64; 2]>,
    },
    /// Frame keys are decimal strings; untagged enums cannot read integer
    /// map keys from json.
    Tracklets {
        tracklets: Vec<BTreeMap<String, WireMask>>,
    },
}

impl GroundingPayload {
    pub fn modality(&self) -> GroundingModality {
        match self {
            GroundingPayload::Masks { .. } => GroundingModality::Image,
            GroundingPayload::Segments { .. } => GroundingModality::Audio,
            GroundingPayload::Tracklets { .. } => GroundingModality::Video,
        }
    }

    pub fn from_groundings(
        modality: GroundingModality,
        items: &[GroundingRef],
    ) -> GroundingPayload {
        match modality {
            GroundingModality::Image => GroundingPayload::Masks {
                masks: items
                    .iter()
                    .filter_map(|g| match g {
                        GroundingRef::Image(m) => Some(WireMask::from(m)),
                        _ => None,
                    })
                    .collect(),
            },
            GroundingModality::Audio => GroundingPayload::Segments {
                segments: items
                    .iter()
                    .filter_map(|g| match g {
                        GroundingRef::Audio(s) => Some([s.start(), s.end()]),
                        _ => None,
                    })
                    .collect(),
            },
            GroundingModality::Video => GroundingPayload::Tracklets {
                tracklets: items
                    .iter()
                    .filter_map(|g| match g {
                        GroundingRef::Video(t) => Some(
                            t.frames()
                                .iter()
                                .map(|(f, m)| (f.to_string(), WireMask::from(m)))
                                .collect(),
                        ),
                        _ => None,
                    })
                    .collect(),
            },
        }
    }

    /// Converts to typed groundings, validating every mask and segment.
    pub fn into_groundings(self) -> crate::Result<Vec<GroundingRef>> {
        match self {
            GroundingPayload::Masks { masks } => masks
                .into_iter()
                .map(|m| ImageMask::new(m.width, m.height, m.rle).map(GroundingRef::Image))
                .collect(),
            GroundingPayload::Segments { segments } => segments
                .into_iter()
                .map(|[s, e]| AudioSegment::new(s, e).map(GroundingRef::Audio))
                .collect(),
            GroundingPayload::Tracklets { tracklets } => tracklets
                .into_iter()
                .map(|frames| {
                    let frames = frames
                        .into_iter()
                        .map(|(f, m)| {
                            let f: u32 = f.parse().map_err(|_| {
                                crate::Error::invalid(format!("bad frame index `{f}`"))
                            })?;
                            ImageMask::new(m.width, m.height, m.rle).map(|m| (f, m))
                        })
                        .collect::<crate::Result<BTreeMap<_, _>>>()?;
                    Tracklet::new(frames).map(GroundingRef::Video)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

/// Builds a `{id, error}` response.
pub fn error_response(id: &str, code: &str, message: &str) -> serde_json::Value {
    serde_json::json!({ "id": id, "error": { "code": code, "message": message } })
}

/// Adds the id to a payload object.
pub fn with_id<T: Serialize>(id: &str, body: &T) -> serde_json::Value {
    let mut v = serde_json::to_value(body).expect("payload serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.insert("id".into(), serde_json::Value::String(id.to_string()));
    }
    v
}
