//! Remote mode: chat-completion clients for generation and judging, prompt
//! templates, and the preference-pair exporter.
//!
//! Remote runs never update parameters; they produce scored pairs for an
//! external trainer.

pub mod chat;
pub mod export;
pub mod judge;
pub mod prompts;
pub mod remote;

pub use chat::{ChatClient, ChatMessage, ChatRequest, ChatResponse, ChatTransport, HttpTransport, RetryPolicy};
pub use export::{export_pairs, read_pairs, ExportRecord, PairExporter, RUBRIC_VERSION};
pub use judge::{parse_verdict, JudgeVerdict, RemoteJudge};
pub use prompts::{generation_prompt, judge_prompt};
pub use remote::{generate, remote_pass_at_k, run_remote_stage2, RemoteRow};
