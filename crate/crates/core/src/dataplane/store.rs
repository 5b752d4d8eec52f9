//! Producer-resident ephemeral objects with per-object retrieval credits.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use bytes::Bytes;
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("retrieval count must be at least 1")]
    ZeroRetrievals,
}

#[derive(Debug)]
struct BufferedObject {
    payload: Bytes,
    remaining_retrievals: u32,
    /// Credits held by pulls that are still streaming.
    reserved: u32,
    #[allow(dead_code)]
    created_at: Instant,
}

#[derive(Debug, Default)]
struct StoreState {
    objects: HashMap<u64, BufferedObject>,
    next_key: u64,
    bytes_resident: u64,
    /// Abort the next pull once it has streamed this many bytes, then drop
    /// every object as an instance crash would.
    crash_after_bytes: Option<u64>,
}

#[derive(Debug)]
struct StoreInner {
    state: Mutex<StoreState>,
    /// Bumped by every `release_all`; leases watch it to abort.
    epoch: watch::Sender<u64>,
}

/// Shared handle to one instance's object buffer.
#[derive(Debug, Clone)]
pub struct ObjectStore {
    inner: Arc<StoreInner>,
}

impl Default for ObjectStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ObjectStore {
    pub fn new() -> Self {
        let (epoch, _) = watch::channel(0);
        Self {
            inner: Arc::new(StoreInner { state: Mutex::new(StoreState::default()), epoch }),
        }
    }

    fn state(&self) -> MutexGuard<'_, StoreState> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Buffers an immutable payload retrievable `n` times; returns its key.
    pub fn buffer_object(&self, payload: Bytes, n: u32) -> Result<u64, StoreError> {
        if n == 0 {
            return Err(StoreError::ZeroRetrievals);
        }
        let mut st = self.state();
        let key = st.next_key;
        st.next_key += 1;
        st.bytes_resident += payload.len() as u64;
        st.objects.insert(
            key,
            BufferedObject { payload, remaining_retrievals: n, reserved: 0, created_at: Instant::now() },
        );
        Ok(key)
    }

    /// Reserves one retrieval credit for a pull. `None` when the key is absent
    /// or every remaining credit is already held by an in-progress pull.
    pub fn lease(&self, key: u64) -> Option<Lease> {
        let mut st = self.state();
        let obj = st.objects.get_mut(&key)?;
        if obj.reserved >= obj.remaining_retrievals {
            return None;
        }
        obj.reserved += 1;
        let payload = obj.payload.clone();
        drop(st);
        Some(Lease {
            store: self.clone(),
            key,
            payload,
            epoch: self.inner.epoch.subscribe(),
            settled: false,
        })
    }

    /// Drops every object; in-progress pulls are aborted. Returns the number dropped.
    pub fn release_all(&self) -> usize {
        let dropped = {
            let mut st = self.state();
            st.bytes_resident = 0;
            let n = st.objects.len();
            st.objects.clear();
            n
        };
        self.inner.epoch.send_modify(|e| *e += 1);
        dropped
    }

    pub fn bytes_resident(&self) -> u64 {
        self.state().bytes_resident
    }

    pub fn len(&self) -> usize {
        self.state().objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn remaining_retrievals(&self, key: u64) -> Option<u32> {
        self.state().objects.get(&key).map(|o| o.remaining_retrievals)
    }

    /// Scripted fault: the next pull stops before its payload bytes would
    /// exceed `bytes`, then the store behaves as if its instance crashed.
    pub fn inject_crash_after(&self, bytes: u64) {
        self.state().crash_after_bytes = Some(bytes);
    }

    pub(crate) fn take_crash_plan(&self) -> Option<u64> {
        self.state().crash_after_bytes.take()
    }

    fn settle(&self, key: u64, completed: bool) {
        let mut st = self.state();
        let Some(obj) = st.objects.get_mut(&key) else {
            return;
        };
        obj.reserved -= 1;
        if completed {
            obj.remaining_retrievals -= 1;
            if obj.remaining_retrievals == 0 {
                let len = obj.payload.len() as u64;
                st.objects.remove(&key);
                st.bytes_resident -= len;
            }
        }
    }
}

/// One reserved retrieval. Dropping without [`Lease::complete`] returns the credit.
#[derive(Debug)]
pub struct Lease {
    store: ObjectStore,
    key: u64,
    payload: Bytes,
    epoch: watch::Receiver<u64>,
    settled: bool,
}

impl Lease {
    pub fn payload(&self) -> &Bytes {
        &self.payload
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Resolves once the store is released after this lease was taken.
    pub async fn released(&mut self) {
        // Sender lives as long as the store, which this lease keeps alive.
        let _ = self.epoch.changed().await;
    }

    pub fn complete(mut self) {
        self.settled = true;
        self.store.settle(self.key, true);
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        if !self.settled {
            self.store.settle(self.key, false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_start_at_zero_and_increase() {
        let s = ObjectStore::new();
        assert_eq!(s.buffer_object(Bytes::from_static(&[0; 10]), 1), Ok(0));
        assert_eq!(s.buffer_object(Bytes::new(), 1), Ok(1));
        assert_eq!(s.buffer_object(Bytes::new(), 1), Ok(2));
    }

    #[test]
    fn zero_retrievals_rejected() {
        assert_eq!(ObjectStore::new().buffer_object(Bytes::new(), 0), Err(StoreError::ZeroRetrievals));
    }

    #[test]
    fn resident_bytes_track_payloads() {
        let s = ObjectStore::new();
        s.buffer_object(Bytes::from(vec![0; 1 << 20]), 1).unwrap();
        assert_eq!(s.bytes_resident(), 1_048_576);
        let k = s.buffer_object(Bytes::from(vec![0; 10]), 1).unwrap();
        s.lease(k).unwrap().complete();
        assert_eq!(s.bytes_resident(), 1_048_576);
    }

    #[test]
    fn completed_lease_consumes_credit_and_removes_at_zero() {
        let s = ObjectStore::new();
        let k = s.buffer_object(Bytes::from_static(b"abc"), 2).unwrap();
        s.lease(k).unwrap().complete();
        assert_eq!(s.remaining_retrievals(k), Some(1));
        s.lease(k).unwrap().complete();
        assert_eq!(s.remaining_retrievals(k), None);
        assert!(s.lease(k).is_none());
        assert_eq!(s.bytes_resident(), 0);
    }

    #[test]
    fn dropped_lease_returns_credit() {
        let s = ObjectStore::new();
        let k = s.buffer_object(Bytes::from_static(b"abc"), 1).unwrap();
        let lease = s.lease(k).unwrap();
        assert!(s.lease(k).is_none(), "only credit is reserved");
        drop(lease);
        assert_eq!(s.remaining_retrievals(k), Some(1));
        assert!(s.lease(k).is_some());
    }

    #[test]
    fn release_all_counts_and_clears() {
        let s = ObjectStore::new();
        assert_eq!(s.release_all(), 0);
        for _ in 0..3 {
            s.buffer_object(Bytes::from_static(b"xyz"), 1).unwrap();
        }
        assert_eq!(s.release_all(), 3);
        assert_eq!(s.bytes_resident(), 0);
        assert!(s.is_empty());
    }

    #[tokio::test]
    async fn release_wakes_active_leases() {
        let s = ObjectStore::new();
        let k = s.buffer_object(Bytes::from_static(b"abc"), 1).unwrap();
        let mut lease = s.lease(k).unwrap();
        let s2 = s.clone();
        tokio::spawn(async move { s2.release_all() });
        tokio::time::timeout(std::time::Duration::from_secs(1), lease.released()).await.unwrap();
        lease.complete();
        assert!(s.is_empty());
    }

    #[test]
    fn concurrent_leases_never_exceed_credits() {
        let s = ObjectStore::new();
        let k = s.buffer_object(Bytes::from_static(b"abc"), 3).unwrap();
        let wins: usize = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..16)
                .map(|_| {
                    let s = s.clone();
                    scope.spawn(move || match s.lease(k) {
                        Some(l) => {
                            l.complete();
                            1
                        }
                        None => 0,
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(wins, 3);
        assert!(s.is_empty());
    }
}
