//! Synthetic environments, agent families and experience collection.

pub mod random_mdp;
pub mod ticket;

mod collect;

pub use collect::{collect_family, collect_leave_one_out, ChallengingFilter};
