use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{make_error_notice, validate, Category, ErrorCause, Message, ValidationVerdict, Violation};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("endpoint `{0}` is already registered")]
    AlreadyRegistered(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("message failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "))]
    Invalid(Vec<Violation>),
    #[error("publish requires a topic")]
    NoTopic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryStatus {
    Delivered,
    Queued,
    ErrorNotified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryResult {
    pub status: DeliveryStatus,
    pub recipient_count: usize,
}

impl DeliveryResult {
    fn delivered(count: usize) -> Self {
        DeliveryResult { status: DeliveryStatus::Delivered, recipient_count: count }
    }
}

/// `Paused` endpoints still accept messages but report them as queued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndpointState {
    Active,
    Paused,
    Failed,
}

/// Running totals used to audit that no message is ever lost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeliveryStats {
    /// Validated messages handed to `route` or `publish`.
    pub accepted: u64,
    /// Copies placed into some inbox (including error notices).
    pub enqueued: u64,
    /// Copies removed from inboxes by consumers.
    pub consumed: u64,
    /// Copies removed by `deregister`.
    pub evicted: u64,
    pub error_notices: u64,
    pub dead_lettered: u64,
}

struct Queued(Message);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // BinaryHeap pops the greatest element, so the smallest dequeue key wins.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other.0.dequeue_key().cmp(&self.0.dequeue_key())
    }
}

struct Endpoint {
    inbox: Mutex<BinaryHeap<Queued>>,
    ready: Condvar,
    state: Mutex<EndpointState>,
}

impl Endpoint {
    fn new() -> Self {
        Endpoint {
            inbox: Mutex::new(BinaryHeap::new()),
            ready: Condvar::new(),
            state: Mutex::new(EndpointState::Active),
        }
    }

    fn push(&self, msg: Message) {
        self.inbox.lock().push(Queued(msg));
        self.ready.notify_one();
    }
}

/// Named endpoints with priority inboxes and topic subscriptions.
///
/// Many producers may route concurrently; each inbox is expected to have a
/// single consumer.
#[derive(Default)]
pub struct EndpointRegistry {
    endpoints: RwLock<BTreeMap<String, Arc<Endpoint>>>,
    topics: RwLock<BTreeMap<String, BTreeSet<String>>>,
    dead_letters: Mutex<Vec<Message>>,
    stats: Mutex<DeliveryStats>,
}

impl std::fmt::Debug for EndpointRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointRegistry")
            .field("endpoints", &self.endpoints.read().keys().collect::<Vec<_>>())
            .field("topics", &*self.topics.read())
            .finish()
    }
}

impl EndpointRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, name: &str) -> Result<(), RegistryError> {
        let mut endpoints = self.endpoints.write();
        if endpoints.contains_key(name) {
            return Err(RegistryError::AlreadyRegistered(name.to_string()));
        }
        endpoints.insert(name.to_string(), Arc::new(Endpoint::new()));
        Ok(())
    }

    /// Registers `name` unless it already exists.
    pub fn ensure_registered(&self, name: &str) {
        self.endpoints
            .write()
            .entry(name.to_string())
            .or_insert_with(|| Arc::new(Endpoint::new()));
    }

    /// Removes the endpoint and its subscriptions, returning whatever was
    /// still waiting in its inbox.
    pub fn deregister(&self, name: &str) -> Result<Vec<Message>, RegistryError> {
        let endpoint = self
            .endpoints
            .write()
            .remove(name)
            .ok_or_else(|| RegistryError::UnknownEndpoint(name.to_string()))?;
        for subscribers in self.topics.write().values_mut() {
            subscribers.remove(name);
        }
        let drained: Vec<Message> = endpoint.inbox.lock().drain().map(|q| q.0).collect();
        self.stats.lock().evicted += drained.len() as u64;
        endpoint.ready.notify_all();
        Ok(drained)
    }

    pub fn is_registered(&self, name: &str) -> bool {
        self.endpoints.read().contains_key(name)
    }

    pub fn set_state(&self, name: &str, state: EndpointState) -> Result<(), RegistryError> {
        let endpoint = self.endpoint(name)?;
        *endpoint.state.lock() = state;
        endpoint.ready.notify_all();
        Ok(())
    }

    pub fn mark_failed(&self, name: &str) -> Result<(), RegistryError> {
        self.set_state(name, EndpointState::Failed)
    }

    pub fn state(&self, name: &str) -> Option<EndpointState> {
        self.endpoints.read().get(name).map(|e| *e.state.lock())
    }

    pub fn subscribe(&self, endpoint: &str, topic: &str) -> Result<(), RegistryError> {
        if !self.is_registered(endpoint) {
            return Err(RegistryError::UnknownEndpoint(endpoint.to_string()));
        }
        self.topics
            .write()
            .entry(topic.to_string())
            .or_default()
            .insert(endpoint.to_string());
        Ok(())
    }

    pub fn unsubscribe(&self, endpoint: &str, topic: &str) {
        if let Some(subscribers) = self.topics.write().get_mut(topic) {
            subscribers.remove(endpoint);
        }
    }

    pub fn subscribers(&self, topic: &str) -> Vec<String> {
        self.topics
            .read()
            .get(topic)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Dispatches by address: point-to-point when `receiver` is set,
    /// otherwise pub-sub on `topic`.
    pub fn route(&self, msg: Message) -> Result<DeliveryResult, RouteError> {
        if let ValidationVerdict::Invalid(violations) = validate(&msg) {
            return Err(RouteError::Invalid(violations));
        }
        if msg.receiver.is_none() {
            return self.publish(msg);
        }
        self.stats.lock().accepted += 1;
        Ok(self.deliver_direct(msg))
    }

    fn deliver_direct(&self, msg: Message) -> DeliveryResult {
        let receiver = msg.receiver.as_deref().unwrap_or_default();
        let target = self.endpoints.read().get(receiver).cloned();
        let cause = match &target {
            None => Some(ErrorCause::Unavailable),
            Some(endpoint) => match *endpoint.state.lock() {
                EndpointState::Failed => Some(ErrorCause::HandlerFailure),
                _ => None,
            },
        };
        match (target, cause) {
            (Some(endpoint), None) => {
                let paused = *endpoint.state.lock() == EndpointState::Paused;
                endpoint.push(msg);
                self.stats.lock().enqueued += 1;
                if paused {
                    DeliveryResult { status: DeliveryStatus::Queued, recipient_count: 1 }
                } else {
                    DeliveryResult::delivered(1)
                }
            }
            (_, cause) => {
                let notice = make_error_notice(&msg, cause.unwrap_or(ErrorCause::Unavailable));
                self.notify_sender(notice);
                DeliveryResult { status: DeliveryStatus::ErrorNotified, recipient_count: 0 }
            }
        }
    }

    /// Delivers a synthesized notice to its receiver, or dead-letters it when
    /// that endpoint is gone too.
    fn notify_sender(&self, notice: Message) {
        debug_assert_eq!(notice.category, Category::Error);
        let receiver = notice.receiver.clone().unwrap_or_default();
        let target = self
            .endpoints
            .read()
            .get(&receiver)
            .filter(|e| *e.state.lock() != EndpointState::Failed)
            .cloned();
        let mut stats = self.stats.lock();
        stats.error_notices += 1;
        match target {
            Some(endpoint) => {
                stats.enqueued += 1;
                drop(stats);
                endpoint.push(notice);
            }
            None => {
                stats.dead_lettered += 1;
                drop(stats);
                tracing::warn!(receiver = %receiver, "error notice dead-lettered");
                self.dead_letters.lock().push(notice);
            }
        }
    }

    /// Copies `msg` to every live subscriber of its topic as of now.
    pub fn publish(&self, msg: Message) -> Result<DeliveryResult, RouteError> {
        let Some(topic) = msg.topic.clone() else {
            return Err(RouteError::NoTopic);
        };
        if let ValidationVerdict::Invalid(violations) = validate(&msg) {
            return Err(RouteError::Invalid(violations));
        }
        let subscribers = self.subscribers(&topic);
        let endpoints = self.endpoints.read();
        let mut count = 0;
        for name in &subscribers {
            if let Some(endpoint) = endpoints.get(name) {
                if *endpoint.state.lock() == EndpointState::Failed {
                    continue;
                }
                endpoint.push(msg.clone());
                count += 1;
            }
        }
        let mut stats = self.stats.lock();
        stats.accepted += 1;
        stats.enqueued += count as u64;
        Ok(DeliveryResult::delivered(count))
    }

    fn endpoint(&self, name: &str) -> Result<Arc<Endpoint>, RegistryError> {
        self.endpoints
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownEndpoint(name.to_string()))
    }

    pub fn try_recv(&self, name: &str) -> Result<Option<Message>, RegistryError> {
        let endpoint = self.endpoint(name)?;
        let msg = endpoint.inbox.lock().pop().map(|q| q.0);
        if msg.is_some() {
            self.stats.lock().consumed += 1;
        }
        Ok(msg)
    }

    /// Blocks up to `timeout` for the next message.
    pub fn recv_timeout(&self, name: &str, timeout: Duration) -> Result<Option<Message>, RegistryError> {
        let endpoint = self.endpoint(name)?;
        let deadline = std::time::Instant::now() + timeout;
        let mut inbox = endpoint.inbox.lock();
        loop {
            if let Some(q) = inbox.pop() {
                drop(inbox);
                self.stats.lock().consumed += 1;
                return Ok(Some(q.0));
            }
            if !self.is_registered(name) {
                return Ok(None);
            }
            if endpoint.ready.wait_until(&mut inbox, deadline).timed_out() {
                let last = inbox.pop().map(|q| q.0);
                drop(inbox);
                if last.is_some() {
                    self.stats.lock().consumed += 1;
                }
                return Ok(last);
            }
        }
    }

    pub fn drain(&self, name: &str) -> Result<Vec<Message>, RegistryError> {
        let mut out = Vec::new();
        while let Some(msg) = self.try_recv(name)? {
            out.push(msg);
        }
        Ok(out)
    }

    pub fn queue_len(&self, name: &str) -> usize {
        self.endpoints.read().get(name).map(|e| e.inbox.lock().len()).unwrap_or(0)
    }

    pub fn total_queued(&self) -> usize {
        self.endpoints.read().values().map(|e| e.inbox.lock().len()).sum()
    }

    pub fn dead_letters(&self) -> Vec<Message> {
        self.dead_letters.lock().clone()
    }

    pub fn stats(&self) -> DeliveryStats {
        *self.stats.lock()
    }
}
