//! Location-gated sharing pipeline for mixed-reality devices.
//!
//! A device localizes against a digital twin of the site, and sharing is
//! only allowed while the fix places it in permitted space. Captured
//! frames pass a local allowlist on the device, then a ceiling check and
//! per-recipient tailoring on the server, and every decision is audited.

pub mod audit;
pub mod geom;
pub mod locate;
pub mod permit;
pub mod policy;
pub mod scene;
pub mod twin;
pub mod wire;

/// Milliseconds since the start of a scenario.
pub type Millis = u64;
