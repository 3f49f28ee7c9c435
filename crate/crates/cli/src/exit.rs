//! Process exit codes. Each failure class has its own code.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Exit {
    Generic = 1,
    NotInstalled = 3,
    AlreadyRunning = 4,
    HealthTimeout = 5,
    NotRunning = 6,
    StillRunning = 7,
    Config = 8,
    LockBusy = 9,
    AlreadyInstalled = 10,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Exit,
    pub message: String,
}

impl Failure {
    pub fn new(code: Exit, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn generic(message: impl ToString) -> Self {
        Self::new(Exit::Generic, message.to_string())
    }
}
