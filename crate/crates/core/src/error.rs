use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Invocation failure codes as they travel in the `x-xdt-status` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    UnknownFunction,
    /// An XDT or through-storage transfer failed before the handler ran.
    XdtTransferFailed,
    FunctionError,
    AuthFailed,
    /// The instance died after the envelope was handed to it.
    InstanceFailed,
    BadRequest,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 6] = [
        ErrorCode::UnknownFunction,
        ErrorCode::XdtTransferFailed,
        ErrorCode::FunctionError,
        ErrorCode::AuthFailed,
        ErrorCode::InstanceFailed,
        ErrorCode::BadRequest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::UnknownFunction => "UNKNOWN_FUNCTION",
            ErrorCode::XdtTransferFailed => "XDT_TRANSFER_FAILED",
            ErrorCode::FunctionError => "FUNCTION_ERROR",
            ErrorCode::AuthFailed => "AUTH_FAILED",
            ErrorCode::InstanceFailed => "INSTANCE_FAILED",
            ErrorCode::BadRequest => "BAD_REQUEST",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorCode::ALL.into_iter().find(|c| c.as_str() == s).ok_or(())
    }
}

/// Framing and decoding failures on either wire protocol.
#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {len} bytes exceeds limit of {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("malformed message: {0}")]
    Malformed(&'static str),
}

impl WireError {
    /// True when the peer closed or reset the connection.
    pub fn is_disconnect(&self) -> bool {
        use std::io::ErrorKind::*;
        matches!(self, WireError::Io(e) if matches!(e.kind(), UnexpectedEof | ConnectionReset | BrokenPipe | ConnectionAborted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_parse_back() {
        for c in ErrorCode::ALL {
            assert_eq!(c.as_str().parse::<ErrorCode>(), Ok(c));
        }
        assert!("nope".parse::<ErrorCode>().is_err());
    }
}
