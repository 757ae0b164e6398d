use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input; `row` is 1-based and counts the header.
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate market {market}: {reason}")]
    DegenerateMarket { market: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("numerical error: {message} (after {iterations} iterations, last change {last_change:e})")]
    Numerical {
        message: String,
        iterations: usize,
        last_change: f64,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::InsufficientData(_)
            | Error::DegenerateMarket { .. } => 3,
            Error::Numerical { .. } | Error::Internal(_) => 4,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let (row, column) = match err.position() {
            Some(pos) => (pos.line() as usize, 0),
            None => (0, 0),
        };
        match err.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: PathBuf::from("<csv>"),
                source,
            },
            kind => Error::Parse {
                row,
                column,
                message: format!("{kind:?}"),
            },
        }
    }
}
