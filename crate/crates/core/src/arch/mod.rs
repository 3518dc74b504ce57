//! Architecture specs, the network builder and cost accounting.

pub mod cost;
pub mod network;
pub mod reference;
pub mod spec;

pub use cost::{
    count, count_flops, count_params, count_with_gates, diff_reports, CostReport, CostRow, GateConv,
};
pub use network::{Block, ForwardOut, Model, Network, Stage};
pub use spec::{preset, ArchSpec, ConfigOverrides, Depth, Family, InputGeometry};
