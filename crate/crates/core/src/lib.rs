//! Question extension, method reuse and entropy accounting for
//! model-assisted problem solving.

pub mod entropy;
pub mod extension;
pub mod gateway;
pub mod method_store;
pub mod network;
pub mod orchestrator;
pub mod templates;
pub mod text;

pub use gateway::{Gateway, GatewayError};
pub use method_store::{Method, MethodStore};
pub use templates::Templates;
