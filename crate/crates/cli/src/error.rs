use hacseg_core::RasterError;
use hacseg_net::NetError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        Self { kind: Kind::Config, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: m.into() }
    }

    pub fn numeric(m: impl Into<String>) -> Self {
        Self { kind: Kind::Numeric, message: m.into() }
    }

    /// One JSON object on one line.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "exit_code": self.kind.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        let m = e.to_string();
        match e {
            NetError::Config(_) => CliError::config(m),
            NetError::NonFinite(_) | NetError::Diverged { .. } | NetError::Tensor(_) => CliError::numeric(m),
            NetError::Data(_) | NetError::Checkpoint(_) | NetError::Raster(_) | NetError::Io(_) => CliError::data(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}
