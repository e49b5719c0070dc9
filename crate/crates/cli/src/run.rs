use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use hydrarec::Error;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub messages: Vec<String>,
}

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl Failure {
    pub fn config(messages: Vec<String>) -> Self {
        Self { code: EXIT_CONFIG, messages }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, messages: vec![msg.into()] }
    }

    pub fn io(path: &Path, e: io::Error) -> Self {
        Self { code: EXIT_INTERNAL, messages: vec![format!("{}: {e}", path.display())] }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(msgs) => return Failure::config(msgs.clone()),
            Error::Data(_) | Error::Input(_) | Error::Io { .. } | Error::Checkpoint(_) => EXIT_DATA,
            Error::NonFinite(_) | Error::DivisionByZero { .. } => EXIT_NUMERIC,
            Error::Shape { .. } | Error::Axis { .. } | Error::NonScalarLoss(_) => EXIT_INTERNAL,
        };
        Self { code, messages: vec![e.to_string()] }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.messages.as_slice() {
            [one] => f.write_str(one),
            many => {
                writeln!(f, "{} problems:", many.len())?;
                for m in many {
                    writeln!(f, "  - {m}")?;
                }
                Ok(())
            }
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Output directory of one invocation.
pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
}

impl RunDir {
    /// Creates `<base>/<UTC timestamp>-<command>-<hash>`, adding a numeric
    /// suffix rather than reusing an existing directory.
    pub fn create(base: &Path, command: &str, hash: &str) -> CmdResult<Self> {
        fs::create_dir_all(base).map_err(|e| Failure::io(base, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let stem = format!("{stamp}-{command}-{hash}");
        for i in 0.. {
            let name = if i == 0 { stem.clone() } else { format!("{stem}-{i}") };
            let path = base.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path, hash: hash.to_string() }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(Failure::io(&path, e)),
            }
        }
        unreachable!()
    }

    /// A nested directory for one part of a larger run (a sweep cell).
    pub fn child(&self, name: &str, hash: &str) -> CmdResult<Self> {
        let path = self.path.join(name);
        fs::create_dir(&path).map_err(|e| Failure::io(&path, e))?;
        Ok(Self { path, hash: hash.to_string() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CmdResult<PathBuf> {
        let path = self.file(name);
        fs::write(&path, contents).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }
}
