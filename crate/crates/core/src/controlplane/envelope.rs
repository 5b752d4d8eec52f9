//! Control-plane messages and their byte-stream framing.
//!
//! ```text
//! frame   = len:u32 ‖ message
//! message = request_id ‖ function_url ‖ header_count:u32 ‖ (key ‖ value)* ‖ body
//! field   = len:u32 ‖ bytes
//! ```
//!
//! All integers are big-endian. Responses reuse the same message shape with
//! the outcome carried in [`STATUS_HEADER`].

use std::collections::BTreeMap;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::error::{ErrorCode, WireError};
use crate::refcrypto::REF_HEADER;

/// Default cap on inline bodies (6 MiB).
pub const DEFAULT_INLINE_LIMIT: usize = 6 * 1024 * 1024;
/// Slack on top of the body limit for ids and headers.
pub const HEADER_SLACK: usize = 64 * 1024;

pub const STATUS_HEADER: &str = "x-xdt-status";
pub const ERROR_HEADER: &str = "x-xdt-error";
pub const TRANSPORT_HEADER: &str = "x-xdt-transport";
/// Through-storage counterpart of [`REF_HEADER`].
pub const STORE_REF_HEADER: &str = "x-xdt-store-ref";
/// Set by a queue proxy when the body follows as data-plane chunk frames.
pub const INBOUND_HEADER: &str = "x-xdt-inbound";
pub const STATUS_OK: &str = "ok";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InvocationEnvelope {
    pub request_id: String,
    pub function_url: String,
    pub headers: BTreeMap<String, String>,
    pub inline_body: Bytes,
}

impl InvocationEnvelope {
    pub fn new(function_url: impl Into<String>, inline_body: impl Into<Bytes>) -> Self {
        Self {
            request_id: uuid::Uuid::new_v4().to_string(),
            function_url: function_url.into(),
            headers: BTreeMap::new(),
            inline_body: inline_body.into(),
        }
    }

    pub fn with_header(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.insert(key.into(), value.into());
        self
    }

    pub fn header(&self, key: &str) -> Option<&str> {
        self.headers.get(key).map(String::as_str)
    }

    pub fn reference(&self) -> Option<&str> {
        self.header(REF_HEADER)
    }

    /// Successful response to `self` carrying `body`.
    pub fn reply(&self, body: impl Into<Bytes>) -> Self {
        Self {
            request_id: self.request_id.clone(),
            function_url: self.function_url.clone(),
            headers: BTreeMap::from([(STATUS_HEADER.to_owned(), STATUS_OK.to_owned())]),
            inline_body: body.into(),
        }
    }

    pub fn fail(&self, code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            request_id: self.request_id.clone(),
            function_url: self.function_url.clone(),
            headers: BTreeMap::from([
                (STATUS_HEADER.to_owned(), code.as_str().to_owned()),
                (ERROR_HEADER.to_owned(), message.into()),
            ]),
            inline_body: Bytes::new(),
        }
    }

    /// `Ok(())` for successful responses, the carried code and message otherwise.
    pub fn status(&self) -> Result<(), (ErrorCode, String)> {
        match self.header(STATUS_HEADER) {
            None | Some(STATUS_OK) => Ok(()),
            Some(code) => Err((
                code.parse().unwrap_or(ErrorCode::BadRequest),
                self.header(ERROR_HEADER).unwrap_or_default().to_owned(),
            )),
        }
    }

    pub fn encoded_len(&self) -> usize {
        let fields = self.request_id.len() + self.function_url.len() + self.inline_body.len();
        let headers: usize = self.headers.iter().map(|(k, v)| 8 + k.len() + v.len()).sum();
        4 * 4 + fields + headers
    }

    pub fn encode(&self) -> BytesMut {
        let mut buf = BytesMut::with_capacity(self.encoded_len());
        put_field(&mut buf, self.request_id.as_bytes());
        put_field(&mut buf, self.function_url.as_bytes());
        buf.put_u32(self.headers.len() as u32);
        for (k, v) in &self.headers {
            put_field(&mut buf, k.as_bytes());
            put_field(&mut buf, v.as_bytes());
        }
        put_field(&mut buf, &self.inline_body);
        buf
    }

    pub fn decode(mut buf: Bytes) -> Result<Self, WireError> {
        let request_id = take_string(&mut buf)?;
        let function_url = take_string(&mut buf)?;
        if buf.remaining() < 4 {
            return Err(WireError::Malformed("truncated header count"));
        }
        let count = buf.get_u32() as usize;
        let mut headers = BTreeMap::new();
        for _ in 0..count {
            let k = take_string(&mut buf)?;
            let v = take_string(&mut buf)?;
            if headers.insert(k, v).is_some() {
                return Err(WireError::Malformed("duplicate header"));
            }
        }
        let inline_body = take_field(&mut buf)?;
        if buf.has_remaining() {
            return Err(WireError::Malformed("trailing bytes"));
        }
        Ok(Self { request_id, function_url, headers, inline_body })
    }
}

fn put_field(buf: &mut BytesMut, data: &[u8]) {
    buf.put_u32(data.len() as u32);
    buf.put_slice(data);
}

fn take_field(buf: &mut Bytes) -> Result<Bytes, WireError> {
    if buf.remaining() < 4 {
        return Err(WireError::Malformed("truncated field length"));
    }
    let len = buf.get_u32() as usize;
    if buf.remaining() < len {
        return Err(WireError::Malformed("truncated field"));
    }
    Ok(buf.split_to(len))
}

fn take_string(buf: &mut Bytes) -> Result<String, WireError> {
    let raw = take_field(buf)?;
    String::from_utf8(raw.to_vec()).map_err(|_| WireError::Malformed("field is not utf-8"))
}

pub async fn write_envelope<W: AsyncWrite + Unpin>(w: &mut W, env: &InvocationEnvelope) -> Result<(), WireError> {
    let msg = env.encode();
    w.write_u32(msg.len() as u32).await?;
    w.write_all(&msg).await?;
    w.flush().await?;
    Ok(())
}

/// Reads one frame, rejecting messages longer than `max` before allocating.
pub async fn read_envelope<R: AsyncRead + Unpin>(r: &mut R, max: usize) -> Result<InvocationEnvelope, WireError> {
    let len = r.read_u32().await? as usize;
    if len > max {
        return Err(WireError::FrameTooLarge { len, max });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).await?;
    InvocationEnvelope::decode(Bytes::from(buf))
}
