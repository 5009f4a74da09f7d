use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("state error: {0}")]
    State(String),

    #[error("key overlap: {0}")]
    KeyOverlap(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("query spec error: {0}")]
    QuerySpec(String),

    #[error("execution error: {0}")]
    Exec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid user input (bad spec, bad data
    /// layout) as opposed to runtime failures. The CLI maps this to its
    /// exit-code split.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Graph(_)
                | Error::Ingest(_)
                | Error::QuerySpec(_)
                | Error::Domain(_)
        )
    }
}
