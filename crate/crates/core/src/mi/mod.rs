//! Mutual-information estimates over learned representations.

pub mod mine;
pub mod pipeline;

pub use mine::{mine_estimate, standardize, MIEstimate, MineConfig};
pub use pipeline::{
    dpi_compare, mi_report_csv, mi_vs_k, reduce_states, token_mi_csv, token_mi_matrix, MiRow, Representation,
};
