//! Library side of the `hwau` binary: configuration, run directories and
//! one function per subcommand.

pub mod commands;
pub mod config;
pub mod rundir;

pub use commands::{cmd_ablate, cmd_eval, cmd_infer, cmd_phantom, cmd_train, AblationRow, EvalSource, Outcome, ABLATION_ROWS};
pub use config::RunConfig;
pub use rundir::{create_run_dir, Invocation};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] hwau_core::Error),
}

impl CliError {
    /// Process exit status: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(e) if e.is_data() => 3,
            CliError::Core(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            3 => "data",
            4 => "numerical",
            _ => "config",
        }
    }

    /// A single JSON line describing the failure.
    pub fn machine_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "reason": self.to_string().replace('\n', " "),
        })
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hwau_core::Error;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::Data("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::Version(9)).exit_code(), 3);
        let nan = CliError::from(Error::NonFiniteTensor { name: "w".into(), index: 3 });
        assert_eq!(nan.exit_code(), 4);
        let line = nan.machine_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["code"], 4);
        assert_eq!(v["error"], "numerical");
    }
}
