//! A misbehaving OpenAI-compatible gateway for desk-scale audits.
//!
//! Personas stand in for vendor models. A scenario decides which persona
//! answers, how history is truncated, how usage is reported and billed, how
//! fingerprints rotate and how long replies take.

mod gateway;
mod http;
pub mod persona;
pub mod scenario;
mod seed;

pub use gateway::{GatewayStats, MockGateway, Prepared};
pub use http::{serve_http, ServerHandle};
pub use persona::{persona_answer, persona_chat, roster, DomainAccuracy, LogNormal, Persona};
pub use scenario::{
    BillingMisbehavior, Fault, FingerprintBehavior, MisbehaviorConfig, Scenario, SecondaryLatency,
    Substitution, Truncation,
};
