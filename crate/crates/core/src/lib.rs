//! Community fedlets: membership control plane, data plane, apps and a
//! deterministic simulator to run many of them in one process.

pub mod app;
pub mod appspec;
pub mod fedcore;
pub mod fedctl;
pub mod fedlet;
pub mod identity;
pub mod sim;
pub mod transport;
