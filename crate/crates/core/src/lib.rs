//! Agent rollout orchestration.
//!
//! The crate is organised bottom-up:
//!
//! - [`message`]: the single envelope type used for all traffic, plus an
//!   in-process endpoint registry with priority inboxes, topic pub-sub and
//!   automatic error notification.
//! - [`tools`]: deterministic sandboxed tools (calculator, corpus search,
//!   jailed file access, a latency-only no-op).
//! - [`agent`]: the single-agent loop, pluggable policies, agent-as-tool
//!   composition and delegation topologies.
//! - [`cluster`]: the coordinator/worker executor with a checksummed trace
//!   store, heartbeat failure detection and crash recovery.
//! - [`train`]: exact-match rewards, group-standardized advantages, rollout
//!   groups, training batches and policy-version synchronization.
//! - [`eval`]: pass@k estimation, the rollout-scaling experiment and the
//!   sequential-vs-distributed benchmark.

pub mod agent;
pub mod cluster;
pub mod eval;
pub mod message;
pub mod seed;
pub mod tools;
pub mod train;

pub use agent::{
    ActionKind, ActionModel, AgentSpec, AgentState, AgentStatus, Environment, Observation,
    Policy, PolicyConfig, PromptContext, Trajectory, TrajectoryStep,
};
pub use cluster::{TaskItem, TraceEvent, TraceKind};
pub use message::{
    Category, DeliveryResult, DeliveryStatus, EndpointRegistry, ErrorCause, ErrorNotice, Message,
    Payload,
};
pub use tools::{ToolRegistry, ToolResult, ToolSpec};
pub use train::{grpo_advantages, RolloutGroup};
