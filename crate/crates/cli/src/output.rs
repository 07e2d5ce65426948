use std::fmt;
use std::path::{Path, PathBuf};

use cohar_core::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Output directory exists and is not empty.
    Refused(PathBuf),
    GradcheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.root() {
                Error::Divergence { .. } => 4,
                _ => 2,
            },
            CliError::Refused(_) => 3,
            CliError::GradcheckFailed(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Refused(p) => write!(
                f,
                "output directory {} exists and is not empty (use --force to write into it)",
                p.display()
            ),
            CliError::GradcheckFailed(ops) => write!(f, "gradient check failed for: {}", ops.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Refused(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
    Ok(())
}
