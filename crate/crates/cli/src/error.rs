use diffattack_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: CoreError,
    },
}

impl CliError {
    pub fn stage(stage: &'static str) -> impl Fn(CoreError) -> CliError {
        move |source| CliError::Stage { stage, source }
    }

    /// 2 config, 3 artifact or manifest, 4 numerical divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Stage { source, .. } => match source {
                CoreError::Divergence { .. } => 4,
                CoreError::Io(_) | CoreError::Format { .. } | CoreError::Lookup { .. } => 3,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
