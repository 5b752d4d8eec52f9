use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::costmodel::ExecutionLog;

/// Cluster-wide record of handler executions.
#[derive(Debug, Clone, Default)]
pub struct ExecutionLedger {
    entries: Arc<Mutex<Vec<ExecutionLog>>>,
}

impl ExecutionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, log: ExecutionLog) {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).push(log);
    }

    pub fn snapshot(&self) -> Vec<ExecutionLog> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Entries recorded since `mark` (a previous [`ExecutionLedger::len`]).
    pub fn since(&self, mark: usize) -> Vec<ExecutionLog> {
        let entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        entries.get(mark..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn executions_of(&self, request_id: &str) -> usize {
        self.entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|l| l.request_id == request_id)
            .count()
    }

    pub fn executions_for(&self, function_url: &str) -> usize {
        self.entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|l| l.function_url == function_url)
            .count()
    }

    /// Request ids that executed more than once; empty under at-most-once.
    pub fn duplicate_executions(&self) -> Vec<String> {
        let entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for e in entries.iter() {
            *counts.entry(&e.request_id).or_default() += 1;
        }
        counts.into_iter().filter(|&(_, n)| n > 1).map(|(id, _)| id.to_owned()).collect()
    }
}
