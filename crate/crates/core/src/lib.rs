//! Aggregate flexibility of thermostatically controlled load (TCL) ensembles
//! expressed as a first-order virtual battery.
//!
//! The crate is organised bottom-up:
//!
//! - [`devices`]: air-conditioner and water-heater thermal models, ensemble
//!   sampling and thermostat-only baseline simulation.
//! - [`signals`]: normalized regulation signals and their conversion into
//!   ensemble-level power targets.
//! - [`dispatch`]: per-step ON/OFF dispatch that tracks a power target under
//!   temperature bounds, and ensemble violation times.
//! - [`envelope`]: time-varying power limits found by feasibility search.
//! - [`vb`]: the virtual battery itself, its violation times and the
//!   temperature-derived state of charge.
//! - [`fitting`]: identification of dissipation and capacity from violation
//!   times.

pub mod devices;
pub mod dispatch;
pub mod envelope;
pub mod error;
pub mod fitting;
pub mod series;
pub mod signals;
pub mod vb;

pub use error::{Error, Result};

/// Seconds per hour; thermal and battery constants are expressed per hour.
pub const SECONDS_PER_HOUR: f64 = 3600.0;
