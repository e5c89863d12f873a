use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("input contains no interactions")]
    EmptyInput,

    #[error("dataset degenerate after {0}-core filter")]
    Degenerate(usize),

    #[error("{kernel}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn shape(kernel: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            kernel,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
