use std::fmt;
use std::path::Path;

/// Failures reported by the command-line front end.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, arguments or config file. Exit code 1.
    Usage(String),
    /// Anything that went wrong while running a command. Exit code 2.
    Runtime { kind: &'static str, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime { kind: "io", message: format!("{}: {e}", path.display()) }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime { .. } => 2,
        }
    }

    /// Single-line JSON for standard error.
    pub fn to_json(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.as_str()),
            CliError::Runtime { kind, message } => (*kind, message.as_str()),
        };
        serde_json::json!({ "error": kind, "message": message, "exit_code": self.exit_code() }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime { kind, message } => write!(f, "{kind} error: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bashcomment_core::Error> for CliError {
    fn from(e: bashcomment_core::Error) -> Self {
        CliError::Runtime { kind: e.kind(), message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime { kind: "json", message: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_is_one_line() {
        let e = CliError::Usage("bad\nflag".into());
        let line = e.to_json();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "usage");
        assert_eq!(v["exit_code"], 1);
        assert_eq!(CliError::from(bashcomment_core::Error::EmptyCorpus).exit_code(), 2);
    }
}
