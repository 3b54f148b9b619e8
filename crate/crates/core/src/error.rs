use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A normalizer (variance, semi-variance, density) is numerically zero.
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    /// Kernel density estimate is undefined because the sample spread is zero.
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("map error{}: {msg}", fmt_pos(*.row, *.col))]
    Map {
        row: Option<usize>,
        col: Option<usize>,
        msg: String,
    },

    #[error("oracle too large: enumeration exceeds the budget of {budget} paths")]
    OracleTooLarge { budget: u64 },
}

fn fmt_pos(row: Option<usize>, col: Option<usize>) -> String {
    match (row, col) {
        (Some(r), Some(c)) => format!(" at row {r}, col {c}"),
        (Some(r), None) => format!(" at row {r}"),
        _ => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn map(row: Option<usize>, col: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Map {
            row,
            col,
            msg: msg.into(),
        }
    }

    /// True for the errors the trainers downgrade to a skipped variability term.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::DegenerateScale(_) | Error::DegenerateDensity(_)
        )
    }
}
