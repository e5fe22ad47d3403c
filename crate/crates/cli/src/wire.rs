//! JSON messages exchanged with the sandbox client.
//!
//! Every message is an envelope `{"type", "payload", "stamp_ms", "v"}`.
//! `stamp_ms` is the sender's clock; the server's counts from session start.
//! Clients may omit `stamp_ms` and `v`; a `v` other than [`PROTOCOL_VERSION`]
//! is rejected.

use collab_mpc::costs::Weights;
use collab_mpc::geometry::Primitive;
use collab_mpc::mpc::{Phase, StepFlag};
use serde::{Deserialize, Serialize};

use crate::config::ScenarioChoice;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    /// Hand position in meters, world frame.
    HandPose { t: [f64; 3] },
    /// Restart the session; `None` keeps the current scenario.
    Reset { scenario: Option<ScenarioChoice> },
    SetParams { weights: Weights },
}

#[derive(Deserialize)]
struct RawEnvelope {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    payload: serde_json::Value,
    #[serde(default)]
    #[allow(dead_code)]
    stamp_ms: Option<f64>,
    #[serde(default)]
    v: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HandPosePayload {
    t: [f64; 3],
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ResetPayload {
    scenario: Option<ScenarioChoice>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetParamsPayload {
    weights: Weights,
}

/// Parses one text frame. The error string is what goes back to the client.
pub fn parse_client(text: &str) -> Result<ClientMessage, String> {
    let raw: RawEnvelope = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    if let Some(v) = raw.v {
        if v != PROTOCOL_VERSION {
            return Err(format!("unsupported protocol version {v}, expected {PROTOCOL_VERSION}"));
        }
    }
    let bad = |e: serde_json::Error| format!("bad {} payload: {e}", raw.kind);
    match raw.kind.as_str() {
        "hand_pose" => {
            let p: HandPosePayload = serde_json::from_value(raw.payload.clone()).map_err(bad)?;
            if !p.t.iter().all(|x| x.is_finite()) {
                return Err("hand_pose.t must be finite".into());
            }
            Ok(ClientMessage::HandPose { t: p.t })
        }
        "reset" => {
            let p: ResetPayload = if raw.payload.is_null() {
                ResetPayload::default()
            } else {
                serde_json::from_value(raw.payload.clone()).map_err(bad)?
            };
            if let Some(s) = &p.scenario {
                s.validate().map_err(|e| e.to_string())?;
            }
            Ok(ClientMessage::Reset { scenario: p.scenario })
        }
        "set_params" => {
            let p: SetParamsPayload = serde_json::from_value(raw.payload.clone()).map_err(bad)?;
            p.weights.validate().map_err(|e| e.to_string())?;
            Ok(ClientMessage::SetParams { weights: p.weights })
        }
        other => Err(format!("unknown message type {other:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    /// `None` when the cycle held instead of solving.
    pub cost: Option<f64>,
    pub solve_ms: f64,
    pub iterations: usize,
    /// End-effector to hand, meters.
    pub distance: f64,
    pub flag: Option<StepFlag>,
    /// Server time the planned-on hand pose arrived; `None` while the
    /// scenario's default pose is in use.
    pub hand_stamp_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub cycle: usize,
    pub robot_q: Vec<f64>,
    pub ee: [f64; 3],
    pub hand: [f64; 3],
    pub plan_ee: Vec<[f64; 3]>,
    pub agent_pred: Vec<[f64; 3]>,
    pub obstacles: Vec<Primitive>,
    pub phase: Phase,
    pub metrics: StateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ServerPayload {
    State(StateFrame),
    Error(ErrorPayload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    #[serde(flatten)]
    pub body: ServerPayload,
    pub stamp_ms: f64,
    pub v: u32,
}

impl ServerMessage {
    pub fn state(frame: StateFrame, stamp_ms: f64) -> Self {
        Self { body: ServerPayload::State(frame), stamp_ms, v: PROTOCOL_VERSION }
    }

    pub fn error(message: impl Into<String>, stamp_ms: f64) -> Self {
        Self { body: ServerPayload::Error(ErrorPayload { message: message.into() }), stamp_ms, v: PROTOCOL_VERSION }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
