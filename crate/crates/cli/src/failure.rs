use std::fmt;
use std::path::Path;

use lefm::data::DataError;
use lefm::lefm::LefmError;
use lefm::metrics::MetricsError;
use lefm::nn::NnError;
use lefm::train::TrainError;
use lefm::ErrorKind;

/// A classified error, printed as `E<code>: message`.
#[derive(Debug)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Data, format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}: {}", self.exit_code(), self.message)
    }
}

macro_rules! classify {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::new(e.kind(), e.to_string())
            }
        }
    )*};
}

classify!(DataError, TrainError, MetricsError, NnError, LefmError);
