//! Session service for iterative co-composition: generate all tracks from a
//! prompt, lock the ones worth keeping, regenerate the rest conditioned on
//! them, and render the final mix.

pub mod error;
pub mod http;
pub mod script;
pub mod session;
pub mod studio;

pub use error::{ErrorBody, Result, ServiceError};
pub use http::{router, serve};
pub use script::{accept_loop, LocalClient, Reply, ScriptReport};
pub use session::{Candidate, Provenance, Session, SessionView, Status};
pub use studio::{GenerateRequest, SharedModel, Studio, StudioConfig};
