pub mod bilevel;
pub mod ccnn;
pub mod cli;
pub mod complex_lift;
pub mod config;
pub mod contrastive;
pub mod diffcore;
pub mod eval_probe;
pub mod graph_io;
pub mod trim_scheduler;
pub mod wl_refine;
