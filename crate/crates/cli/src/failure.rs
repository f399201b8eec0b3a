use std::fmt;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad config, bad inputs or incompatible checkpoint. Exit code 2.
    Validation(String),
    /// Anything that went wrong after validation passed. Exit code 1.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Failure::Validation(_) => "validation",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }

    /// One JSON line for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.category(), "message": self.message() }).to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category(), self.message())
    }
}

impl From<ta2cl::Error> for Failure {
    fn from(e: ta2cl::Error) -> Self {
        use ta2cl::Error as E;
        match e {
            E::ShapeMismatch { .. } | E::KOutOfRange { .. } | E::InvalidConfig(_) | E::InputTooShort { .. } => {
                Failure::Validation(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}
