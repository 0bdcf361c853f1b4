use std::fmt;

/// A failed command, classified for the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input or configuration; exit code 1.
    Validation(anyhow::Error),
    /// Anything else (I/O and the like); exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl fmt::Display) -> Self {
        Failure::Validation(anyhow::anyhow!("{msg}"))
    }

    /// Prefixes the error with `what`.
    pub fn context(self, what: impl fmt::Display + Send + Sync + 'static) -> Self {
        match self {
            Failure::Validation(e) => Failure::Validation(e.context(what)),
            Failure::Runtime(e) => Failure::Runtime(e.context(what)),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        };
        write!(f, "{e:#}")
    }
}

impl From<dualcurr::Error> for Failure {
    fn from(e: dualcurr::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// Attaches a context message to core results.
pub trait WithContext<T> {
    fn ctx(self, what: impl fmt::Display + Send + Sync + 'static) -> Outcome<T>;
}

impl<T, E: Into<Failure>> WithContext<T> for std::result::Result<T, E> {
    fn ctx(self, what: impl fmt::Display + Send + Sync + 'static) -> Outcome<T> {
        self.map_err(|e| e.into().context(what))
    }
}
