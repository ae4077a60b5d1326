use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config:{}", problems.iter().map(|(f, m)| format!("\n  {f}: {m}")).collect::<String>())]
    Config { problems: Vec<(String, String)> },

    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),

    #[error("config serialization: {0}")]
    Serialize(#[from] toml::ser::Error),

    #[error(transparent)]
    Core(#[from] qlink_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { problems: vec![(field.into(), message.into())] }
    }
}
