use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward called on `{0}` without a cached training forward pass")]
    NoCache(String),
    #[error("archive i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("archive format: {0}")]
    Format(String),
}
