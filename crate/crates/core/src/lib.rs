//! Coupled wealth dynamics of interacting firms in an industrial district.
//!
//! The district is a directed supply network. Each firm carries a utility
//! `u_i` (millions of 2013 GBP) that grows with the value of what it sells,
//! shrinks with what it buys and with its overheads, and is penalised when it
//! cannot procure the supplies it needs. Firms on the district boundary trade
//! with the outside world: primary suppliers import without limit, end
//! consumers export into bounded commodity markets, hubs do both.
//!
//! Crate layout:
//! - [`netmodel`]: network file schema, edge normalisation, role
//!   classification, market caps.
//! - [`calibrate`]: financial records to model parameters.
//! - [`dynamics`]: the right-hand side of the ODE system.
//! - [`integrate`]: adaptive 5(4) integration with failure events, batches.
//! - [`analyze`]: peaks, dominance timeline, narrative.
//! - [`io`]: trajectory and event CSV formats.
//! - [`datasets`]: the bundled Humber reference network.

pub mod analyze;
pub mod calibrate;
pub mod datasets;
pub mod dynamics;
pub mod integrate;
pub mod io;
pub mod netmodel;

pub use analyze::{analyze, narrative, AnalysisReport};
pub use calibrate::{derive_params, CalibrationError, CalibrationReport, FinancialRecord};
pub use dynamics::{FlowBreakdown, RhsError};
pub use integrate::{simulate, IntegrationError, SimConfig, Trajectory};
pub use netmodel::{
    EdgeKind, Flags, MarketCap, MarketSpec, ModelParams, Network, NetworkError, NetworkFile,
    NodeSpec, Role, SupplyEdge,
};
