use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite activations in {0}")]
    NonFinite(String),
    #[error("non-finite loss at stage {stage}, iteration {iter}")]
    Diverged { stage: u8, iter: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Raster(#[from] hacseg_core::RasterError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;
