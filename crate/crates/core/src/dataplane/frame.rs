//! Pull protocol framing.
//!
//! ```text
//! server -> client  challenge (16 bytes)
//! client -> server  mac (32 bytes) ‖ "XDTP" ‖ object_key:u64
//! server -> client  status:u8 (0 = OK, 1 = NotFound, 2 = Unauthorized)
//!                   if OK: frames of  seq:u32 ‖ flags:u8 ‖ len:u32 ‖ data
//! ```
//!
//! Integers are big-endian. Flag bit 0 marks the final chunk; bit 1 marks an
//! aborted stream (used on the queue proxy to function server hop).

use bytes::Bytes;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::error::WireError;

pub const MAGIC: &[u8; 4] = b"XDTP";
pub const CHALLENGE_LEN: usize = 16;
pub const MAC_LEN: usize = 32;
pub const REQUEST_LEN: usize = MAC_LEN + 4 + 8;
pub(crate) const HANDSHAKE_LABEL: &[u8] = b"xdt-pull-handshake";

pub const STATUS_OK: u8 = 0;
pub const STATUS_NOT_FOUND: u8 = 1;
pub const STATUS_UNAUTHORIZED: u8 = 2;

const FLAG_LAST: u8 = 0b01;
const FLAG_ABORT: u8 = 0b10;
pub const FRAME_HEADER_LEN: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub sequence: u32,
    pub data: Bytes,
    pub last: bool,
}

/// Splits a payload into chunks; a zero-length payload yields one empty final chunk.
pub fn chunks(payload: &Bytes, chunk_size: usize) -> impl Iterator<Item = Chunk> + '_ {
    let count = payload.len().div_ceil(chunk_size).max(1);
    (0..count).map(move |i| {
        let start = i * chunk_size;
        let end = (start + chunk_size).min(payload.len());
        Chunk {
            sequence: i as u32,
            data: payload.slice(start..end),
            last: i + 1 == count,
        }
    })
}

pub async fn write_chunk<W: AsyncWrite + Unpin>(w: &mut W, chunk: &Chunk) -> Result<(), WireError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    header[..4].copy_from_slice(&chunk.sequence.to_be_bytes());
    header[4] = if chunk.last { FLAG_LAST } else { 0 };
    header[5..].copy_from_slice(&(chunk.data.len() as u32).to_be_bytes());
    w.write_all(&header).await?;
    w.write_all(&chunk.data).await?;
    Ok(())
}

pub async fn write_abort<W: AsyncWrite + Unpin>(w: &mut W, sequence: u32) -> Result<(), WireError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    header[..4].copy_from_slice(&sequence.to_be_bytes());
    header[4] = FLAG_ABORT;
    w.write_all(&header).await?;
    w.flush().await?;
    Ok(())
}

#[derive(Debug, PartialEq, Eq)]
pub enum Frame {
    Chunk(Chunk),
    Abort,
}

/// Reads one frame. `max_len` bounds the data length and `expected_seq`
/// enforces contiguous numbering.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R, max_len: usize, expected_seq: u32) -> Result<Frame, WireError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    r.read_exact(&mut header).await?;
    let flags = header[4];
    if flags & FLAG_ABORT != 0 {
        return Ok(Frame::Abort);
    }
    let sequence = u32::from_be_bytes(header[..4].try_into().unwrap());
    let len = u32::from_be_bytes(header[5..].try_into().unwrap()) as usize;
    if sequence != expected_seq {
        return Err(WireError::Malformed("non-contiguous chunk sequence"));
    }
    if len > max_len {
        return Err(WireError::FrameTooLarge { len, max: max_len });
    }
    let mut data = vec![0u8; len];
    r.read_exact(&mut data).await?;
    Ok(Frame::Chunk(Chunk {
        sequence,
        data: Bytes::from(data),
        last: flags & FLAG_LAST != 0,
    }))
}

pub fn encode_request(mac: &[u8; MAC_LEN], object_key: u64) -> [u8; REQUEST_LEN] {
    let mut out = [0u8; REQUEST_LEN];
    out[..MAC_LEN].copy_from_slice(mac);
    out[MAC_LEN..MAC_LEN + 4].copy_from_slice(MAGIC);
    out[MAC_LEN + 4..].copy_from_slice(&object_key.to_be_bytes());
    out
}

/// Returns `(mac, object_key)` or an error on bad magic.
pub fn decode_request(raw: &[u8; REQUEST_LEN]) -> Result<(&[u8], u64), WireError> {
    if &raw[MAC_LEN..MAC_LEN + 4] != MAGIC {
        return Err(WireError::Malformed("bad pull magic"));
    }
    let key = u64::from_be_bytes(raw[MAC_LEN + 4..].try_into().unwrap());
    Ok((&raw[..MAC_LEN], key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_mib_is_sixteen_chunks() {
        let payload = Bytes::from(vec![7u8; 1 << 20]);
        let cs: Vec<_> = chunks(&payload, 64 * 1024).collect();
        assert_eq!(cs.len(), 16);
        assert!(cs[15].last);
        assert_eq!(cs[15].sequence, 15);
        assert!(cs[..15].iter().all(|c| !c.last && c.data.len() == 65536));
    }

    #[test]
    fn empty_payload_is_one_empty_final_chunk() {
        let cs: Vec<_> = chunks(&Bytes::new(), 64 * 1024).collect();
        assert_eq!(cs, vec![Chunk { sequence: 0, data: Bytes::new(), last: true }]);
    }

    #[tokio::test]
    async fn frames_round_trip_and_enforce_sequence() {
        let mut wire = Vec::new();
        let c = Chunk { sequence: 3, data: Bytes::from_static(b"abc"), last: true };
        write_chunk(&mut wire, &c).await.unwrap();
        assert_eq!(read_frame(&mut wire.as_slice(), 16, 3).await.unwrap(), Frame::Chunk(c));
        assert!(read_frame(&mut wire.as_slice(), 16, 2).await.is_err());
        assert!(matches!(
            read_frame(&mut wire.as_slice(), 2, 3).await,
            Err(WireError::FrameTooLarge { len: 3, max: 2 })
        ));
    }

    #[tokio::test]
    async fn abort_frame_is_recognised() {
        let mut wire = Vec::new();
        write_abort(&mut wire, 5).await.unwrap();
        assert_eq!(read_frame(&mut wire.as_slice(), 16, 0).await.unwrap(), Frame::Abort);
    }

    #[test]
    fn request_layout() {
        let raw = encode_request(&[1u8; MAC_LEN], 0x0102_0304_0506_0708);
        assert_eq!(&raw[32..36], b"XDTP");
        assert_eq!(&raw[36..], &[1, 2, 3, 4, 5, 6, 7, 8]);
        let (mac, key) = decode_request(&raw).unwrap();
        assert_eq!(mac, &[1u8; MAC_LEN]);
        assert_eq!(key, 0x0102_0304_0506_0708);
        let mut bad = raw;
        bad[32] = b'Y';
        assert!(decode_request(&bad).is_err());
    }

    proptest! {
        #[test]
        fn chunk_algebra(len in 0usize..300_000, chunk_size in 1usize..70_000) {
            let payload = Bytes::from(vec![1u8; len]);
            let cs: Vec<_> = chunks(&payload, chunk_size).collect();
            prop_assert_eq!(cs.len(), len.div_ceil(chunk_size).max(1));
            prop_assert_eq!(cs.iter().map(|c| c.data.len()).sum::<usize>(), len);
            prop_assert_eq!(cs.iter().filter(|c| c.last).count(), 1);
            prop_assert!(cs.last().unwrap().last);
            for (i, c) in cs.iter().enumerate() {
                prop_assert_eq!(c.sequence as usize, i);
                if !c.last {
                    prop_assert_eq!(c.data.len(), chunk_size);
                }
            }
        }
    }
}
