use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

pub const DEFAULT_CHUNK_SIZE: usize = 64 * 1024;
pub const DEFAULT_BUFFER_DEPTH: usize = 1024 * 1024;

/// How a queue proxy hands a pulled object to its function server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum StreamingMode {
    /// Forward only after the whole object is buffered locally.
    #[serde(rename = "sf", alias = "store-and-forward")]
    StoreAndForward,
    /// Forward each chunk downstream as it arrives.
    #[default]
    #[serde(rename = "ct", alias = "cut-through")]
    CutThrough,
}

impl std::str::FromStr for StreamingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sf" | "store-and-forward" => Ok(Self::StoreAndForward),
            "ct" | "cut-through" => Ok(Self::CutThrough),
            other => Err(format!("unknown streaming mode `{other}` (expected sf or ct)")),
        }
    }
}

impl std::fmt::Display for StreamingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::StoreAndForward => "sf",
            Self::CutThrough => "ct",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub chunk_size: usize,
    /// Bytes a consumer may hold received-but-unconsumed before it stops
    /// reading from the socket.
    pub buffer_depth: usize,
    pub streaming_mode: StreamingMode,
    /// Emulated producer link rate in bytes/sec; `None` sends as fast as the
    /// transport accepts.
    pub link_rate: Option<u64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            buffer_depth: DEFAULT_BUFFER_DEPTH,
            streaming_mode: StreamingMode::CutThrough,
            link_rate: None,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.chunk_size == 0 {
            return Err("chunk_size must be positive".into());
        }
        if self.buffer_depth < self.chunk_size {
            return Err(format!(
                "buffer_depth ({}) must be at least chunk_size ({})",
                self.buffer_depth, self.chunk_size
            ));
        }
        if self.link_rate == Some(0) {
            return Err("link_rate must be positive when set".into());
        }
        Ok(())
    }

    /// Whole chunks that fit in the consumer buffer.
    pub fn buffered_chunks(&self) -> usize {
        (self.buffer_depth / self.chunk_size).max(1)
    }

    /// `max(1, ceil(len / chunk_size))`.
    pub fn chunk_count(&self, len: usize) -> usize {
        len.div_ceil(self.chunk_size).max(1)
    }
}

/// Cluster-wide transfer settings, adjustable between benchmark runs.
#[derive(Debug, Clone, Default)]
pub struct TransferSettings(Arc<RwLock<TransferConfig>>);

impl TransferSettings {
    pub fn new(cfg: TransferConfig) -> Self {
        Self(Arc::new(RwLock::new(cfg)))
    }

    pub fn get(&self) -> TransferConfig {
        *self.0.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set(&self, cfg: TransferConfig) -> Result<(), String> {
        cfg.validate()?;
        *self.0.write().unwrap_or_else(|e| e.into_inner()) = cfg;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = TransferConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.buffered_chunks(), 16);
        assert_eq!(cfg.streaming_mode, StreamingMode::CutThrough);
    }

    #[test]
    fn rejects_depth_below_chunk() {
        let cfg = TransferConfig { buffer_depth: 1024, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TransferConfig { chunk_size: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn chunk_count_examples() {
        let cfg = TransferConfig::default();
        assert_eq!(cfg.chunk_count(1 << 20), 16);
        assert_eq!(cfg.chunk_count(0), 1);
        assert_eq!(cfg.chunk_count(65_537), 2);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("SF".parse::<StreamingMode>(), Ok(StreamingMode::StoreAndForward));
        assert_eq!("cut-through".parse::<StreamingMode>(), Ok(StreamingMode::CutThrough));
        assert!("x".parse::<StreamingMode>().is_err());
    }
}
