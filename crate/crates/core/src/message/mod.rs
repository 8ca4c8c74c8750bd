//! The message envelope shared by users, agents, tools and the cluster.
//!
//! A [`Message`] is addressed either point-to-point (`receiver`) or to a
//! pub-sub channel (`topic`), never both. Its canonical JSON form has exactly
//! eleven keys, in declaration order, with the payload encoded as
//! `{"kind": <tag>, "data": {...}}`. The cluster wire protocol frames this
//! encoding verbatim.

mod registry;

pub use registry::{DeliveryResult, DeliveryStats, DeliveryStatus, EndpointRegistry, EndpointState, RegistryError, RouteError};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use crate::agent::{ActionModel, Observation};
use crate::cluster::TaskItem;

/// Sender name used for notices the framework synthesizes itself.
pub const SYSTEM_ENDPOINT: &str = "system";

/// Header carrying the id of the message an error notice refers to.
pub const HEADER_ORIGINAL_ID: &str = "original_message_id";
/// Header carrying how many notices deep an error notice is.
pub const HEADER_ERROR_DEPTH: &str = "error_depth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Task,
    Action,
    Observation,
    Error,
    Control,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Task,
        Category::Action,
        Category::Observation,
        Category::Error,
        Category::Control,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Task => "task",
            Category::Action => "action",
            Category::Observation => "observation",
            Category::Error => "error",
            Category::Control => "control",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCause {
    Unavailable,
    Timeout,
    HandlerFailure,
    ValidationFailure,
}

/// Payload of an `error` message: which endpoint failed and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorNotice {
    pub failed_receiver: String,
    pub cause: ErrorCause,
    pub original_message_id: Uuid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data")]
pub enum Payload {
    ActionModel(ActionModel),
    Observation(Observation),
    TaskItem(TaskItem),
    ErrorNotice(ErrorNotice),
    Control(Value),
}

impl Payload {
    pub fn tag(&self) -> &'static str {
        match self {
            Payload::ActionModel(_) => "ActionModel",
            Payload::Observation(_) => "Observation",
            Payload::TaskItem(_) => "TaskItem",
            Payload::ErrorNotice(_) => "ErrorNotice",
            Payload::Control(_) => "Control",
        }
    }

    /// The only category this payload kind may travel under.
    pub fn category(&self) -> Category {
        match self {
            Payload::ActionModel(_) => Category::Action,
            Payload::Observation(_) => Category::Observation,
            Payload::TaskItem(_) => Category::Task,
            Payload::ErrorNotice(_) => Category::Error,
            Payload::Control(_) => Category::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: Uuid,
    pub session_id: String,
    pub sender: String,
    pub receiver: Option<String>,
    pub caller: Option<String>,
    pub payload: Payload,
    pub category: Category,
    pub topic: Option<String>,
    pub priority: i64,
    pub headers: BTreeMap<String, Value>,
    pub timestamp: f64,
}

static LAST_TIMESTAMP: AtomicU64 = AtomicU64::new(0);

/// Wall-clock epoch seconds, clamped so successive calls never go backwards.
pub fn monotonic_timestamp() -> f64 {
    let wall = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let mut last = LAST_TIMESTAMP.load(Ordering::Relaxed);
    loop {
        let next = wall.max(f64::from_bits(last));
        match LAST_TIMESTAMP.compare_exchange_weak(
            last,
            next.to_bits(),
            Ordering::AcqRel,
            Ordering::Relaxed,
        ) {
            Ok(_) => return next,
            Err(seen) => last = seen,
        }
    }
}

impl Message {
    /// A fresh message with a random id, category derived from the payload
    /// and no route target yet.
    pub fn new(session_id: impl Into<String>, sender: impl Into<String>, payload: Payload) -> Self {
        Message {
            id: Uuid::new_v4(),
            session_id: session_id.into(),
            sender: sender.into(),
            receiver: None,
            caller: None,
            category: payload.category(),
            payload,
            topic: None,
            priority: 0,
            headers: BTreeMap::new(),
            timestamp: monotonic_timestamp(),
        }
    }

    pub fn control(
        session_id: impl Into<String>,
        sender: impl Into<String>,
        frame: &str,
        body: Value,
    ) -> Self {
        Message::new(session_id, sender, Payload::Control(body)).with_header("frame", frame)
    }

    pub fn to(mut self, receiver: impl Into<String>) -> Self {
        self.receiver = Some(receiver.into());
        self
    }

    pub fn on_topic(mut self, topic: impl Into<String>) -> Self {
        self.topic = Some(topic.into());
        self
    }

    pub fn with_caller(mut self, caller: impl Into<String>) -> Self {
        self.caller = Some(caller.into());
        self
    }

    pub fn with_priority(mut self, priority: i64) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_header(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.headers.insert(key.into(), value.into());
        self
    }

    pub fn header_str(&self, key: &str) -> Option<&str> {
        self.headers.get(key).and_then(Value::as_str)
    }

    pub fn header_u64(&self, key: &str) -> Option<u64> {
        self.headers.get(key).and_then(Value::as_u64)
    }

    /// The `frame` header used by the wire protocol, if any.
    pub fn frame(&self) -> Option<&str> {
        self.header_str("frame")
    }

    /// Canonical JSON text.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Sort key for inbox ordering: higher priority first, then older, then smaller id.
    pub fn dequeue_key(&self) -> (std::cmp::Reverse<i64>, OrderedTs, Uuid) {
        (std::cmp::Reverse(self.priority), OrderedTs(self.timestamp), self.id)
    }
}

/// Total order over timestamps (`f64::total_cmp`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderedTs(pub f64);

impl Eq for OrderedTs {}

impl PartialOrd for OrderedTs {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedTs {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoRouteTarget,
    AmbiguousRoute,
    CategoryPayloadMismatch { category: Category, payload: &'static str },
    EmptySender,
    EmptySessionId,
    BadTimestamp,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoRouteTarget => f.write_str("no route target"),
            Violation::AmbiguousRoute => f.write_str("both receiver and topic set"),
            Violation::CategoryPayloadMismatch { category, payload } => {
                write!(f, "category/payload mismatch ({category} carrying {payload})")
            }
            Violation::EmptySender => f.write_str("empty sender"),
            Violation::EmptySessionId => f.write_str("empty session_id"),
            Violation::BadTimestamp => f.write_str("timestamp is not a finite non-negative number"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationVerdict {
    Ok,
    Invalid(Vec<Violation>),
}

impl ValidationVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, ValidationVerdict::Ok)
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ValidationVerdict::Ok => &[],
            ValidationVerdict::Invalid(v) => v,
        }
    }
}

pub fn validate(msg: &Message) -> ValidationVerdict {
    let mut violations = Vec::new();
    match (&msg.receiver, &msg.topic) {
        (None, None) => violations.push(Violation::NoRouteTarget),
        (Some(_), Some(_)) => violations.push(Violation::AmbiguousRoute),
        _ => {}
    }
    if msg.payload.category() != msg.category {
        violations.push(Violation::CategoryPayloadMismatch {
            category: msg.category,
            payload: msg.payload.tag(),
        });
    }
    if msg.sender.is_empty() {
        violations.push(Violation::EmptySender);
    }
    if msg.session_id.is_empty() {
        violations.push(Violation::EmptySessionId);
    }
    if !msg.timestamp.is_finite() || msg.timestamp < 0.0 {
        violations.push(Violation::BadTimestamp);
    }
    if violations.is_empty() {
        ValidationVerdict::Ok
    } else {
        ValidationVerdict::Invalid(violations)
    }
}

/// Builds the notice sent back to `original.sender` when `original` could
/// not be handled. Notices outrank everything else in an inbox.
pub fn make_error_notice(original: &Message, cause: ErrorCause) -> Message {
    make_error_notice_with_detail(original, cause, None)
}

pub fn make_error_notice_with_detail(
    original: &Message,
    cause: ErrorCause,
    detail: Option<String>,
) -> Message {
    let failed_receiver = original
        .receiver
        .clone()
        .or_else(|| original.topic.clone())
        .unwrap_or_default();
    let depth = original.header_u64(HEADER_ERROR_DEPTH).unwrap_or(0) + 1;
    let mut notice = Message::new(
        original.session_id.clone(),
        SYSTEM_ENDPOINT,
        Payload::ErrorNotice(ErrorNotice {
            failed_receiver,
            cause,
            original_message_id: original.id,
            detail,
        }),
    )
    .to(original.sender.clone())
    .with_priority(i64::MAX);
    notice.caller = original.caller.clone();
    notice.headers = original.headers.clone();
    notice
        .headers
        .insert(HEADER_ORIGINAL_ID.into(), Value::String(original.id.to_string()));
    notice.headers.insert(HEADER_ERROR_DEPTH.into(), Value::from(depth));
    notice
}
