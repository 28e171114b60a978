use std::fmt;
use std::path::Path;

/// Stable, machine-readable failure classes. Each maps to its own exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Io,
    MissingInput,
    Exists,
    Locked,
    Mismatch,
    InvalidData,
    Solver,
    Unsupported,
    Internal,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::MissingInput => "missing_input",
            Category::Exists => "exists",
            Category::Locked => "locked",
            Category::Mismatch => "mismatch",
            Category::InvalidData => "invalid_data",
            Category::Solver => "solver",
            Category::Unsupported => "unsupported",
            Category::Internal => "internal",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Config => 3,
            Category::Io => 4,
            Category::MissingInput => 5,
            Category::Exists => 6,
            Category::Locked => 7,
            Category::Mismatch => 8,
            Category::InvalidData => 9,
            Category::Solver => 10,
            Category::Unsupported => 11,
            Category::Internal => 70,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn unsupported(message: impl Into<String>) -> Self {
        Self::new(Category::Unsupported, message)
    }

    pub fn missing(what: &str, path: &Path, hint: &str) -> Self {
        Self::new(
            Category::MissingInput,
            format!("{what} not found at {} (run `porestack {hint}` first)", path.display()),
        )
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(Category::Io, format!("{}: {e}", path.display()))
    }

    pub fn context(mut self, ctx: &str) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }

    /// One JSON object on a single line, for scripts reading stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.category.as_str(), "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category.as_str(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<porestack::Error> for CliError {
    fn from(e: porestack::Error) -> Self {
        use porestack::Error as E;
        let category = match &e {
            E::Shape(_) | E::InvalidArgument(_) => Category::Config,
            E::Data(_) | E::Format(_) => Category::InvalidData,
            E::NoConvergence(_) => Category::Solver,
            E::Mismatch(_) => Category::Mismatch,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Category::MissingInput,
            E::Io { .. } => Category::Io,
        };
        Self::new(category, e.to_string())
    }
}
