//! Configuration, metrics, traces, the command line and the chat REPL.

mod chat;
pub mod cli;
mod config;
mod metrics;
mod trace;

pub use chat::{chat_repl, HumanResponder};
pub use config::{Mode, RunConfig, RunSection};
pub use metrics::{compute_metrics, Metrics, MetricsReport, UserMetrics};
pub use trace::{
    episodes_from_lines, load_trace, render_action, render_episodes, render_feedback, render_header, render_outcome,
    save_trace, trace_lines, write_trace, TraceLine,
};
