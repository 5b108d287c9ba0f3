//! Building blocks of the detector heads.

pub mod l2norm;
pub mod layers;
pub mod lstm;
mod maxout;
pub mod part;
pub mod roi;

pub use l2norm::{GAMMA_INIT, L2_EPS};
pub use layers::{Conv2dLayer, Linear};
pub use lstm::{grid_lstm_params, grid_lstm_refine, lstm_cell, GridLstm, LstmDirection, LstmVars, ScanDirection};
pub use part::{aggregate_scores, part_branch_aggregate, part_score_head, PartHead, PartScoreMap, TapHead};
pub use roi::Roi;
