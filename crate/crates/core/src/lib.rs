//! Super-replication in a market with transient price impact.
//!
//! A large investor's trades widen the bid-ask spread, which then recovers
//! at the market's resilience rate, and move the mid-price permanently. This
//! crate evaluates the resulting wealth of bounded-variation strategies on
//! finite scenario trees, prices exogenous claims by minimal super-replication
//! cost, and evaluates and searches the dual certificates that bound this
//! cost from below.
//!
//! Module map:
//!
//! * [`market`]: time grid, depth, resilience and the derived liquidity measure.
//! * [`tree`]: scenario trees, node measures and martingale tools.
//! * [`strategy`]: trade schedules.
//! * [`wealth`]: terminal cash, its quadratic decomposition and diagnostics.
//! * [`duality`]: dual certificates, feasibility and weak duality.
//! * [`solver`]: primal and dual solvers and the duality gap.
//! * [`applications`]: call super-replication and shadow-price verification.
//! * [`io`]: file formats.

pub mod applications;
pub mod duality;
pub mod io;
pub mod market;
pub mod solver;
pub mod strategy;
pub mod tree;
pub mod wealth;

pub use duality::DualCertificate;
pub use market::{ImpactParams, Market, MarketSpec, TimeGrid};
pub use strategy::TradeSchedule;
pub use tree::{NodeMeasure, ScenarioTree};
