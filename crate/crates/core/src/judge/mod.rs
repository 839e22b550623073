//! Optional judging client: renders evaluation prompts, sends them to a
//! chat-completion endpoint (or an offline mock) and turns the replies into
//! a [`ScoreDataset`](crate::model::ScoreDataset).

pub mod parse;
pub mod prompt;
pub mod runner;

use thiserror::Error;

pub use parse::{parse_evaluations, Scored};
pub use prompt::{render_prompt, CandidateAnswer, JudgeQuestion, RenderedPrompt, TaskKind};
pub use runner::{
    run_judging, ChatMessage, ChatRequest, HttpTransport, JudgeSpec, MockEntry, MockTransport,
    RetryPolicy, RunConfig, RunSummary, Transport, TransportError,
};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("missing prompt data: {0}")]
    MissingData(String),
    #[error("malformed judge response: {message}")]
    MalformedResponse { message: String, salvaged: Vec<Scored> },
    #[error("judge response has no evaluation for candidate {id:?}")]
    MissingCandidate { id: String, parsed: Vec<Scored> },
    #[error("judge {judge_id:?} on question {question_id:?}: {message}")]
    Transport {
        judge_id: String,
        question_id: String,
        message: String,
    },
    #[error("endpoint configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    BadLine {
        path: String,
        line: usize,
        message: String,
    },
}
