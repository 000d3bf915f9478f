//! Command-line front end: experiment configuration, the collect/train/eval
//! pipeline, gaze replays and the teleoperation bridge.

pub mod commands;
pub mod config;
pub mod replay;
pub mod teleop;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/teleop.md")]
    mod teleop {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
