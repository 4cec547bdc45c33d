use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::cache_model::LineAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AbortReason {
    ReadSetEvicted,
    Spontaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AbortInfo {
    pub reason: AbortReason,
    /// Cycle at which the abort handler gets control.
    pub timestamp: u64,
    /// Cycle at which the abort condition occurred.
    pub cause_cycle: u64,
    pub evicted: Option<LineAddr>,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum TxError {
    #[error("transaction already active")]
    Nested,
    #[error("no active transaction")]
    Inactive,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transaction {
    active: bool,
    read_set: BTreeSet<LineAddr>,
    abort: Option<AbortInfo>,
    spontaneous_at: Option<u64>,
}

impl Transaction {
    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn read_set(&self) -> &BTreeSet<LineAddr> {
        &self.read_set
    }

    /// Abort of the most recent transaction, if it aborted.
    pub fn abort_info(&self) -> Option<AbortInfo> {
        self.abort
    }

    pub fn spontaneous_at(&self) -> Option<u64> {
        self.spontaneous_at
    }

    pub fn begin(&mut self, spontaneous_at: Option<u64>) -> Result<(), TxError> {
        if self.active {
            return Err(TxError::Nested);
        }
        self.active = true;
        self.read_set.clear();
        self.abort = None;
        self.spontaneous_at = spontaneous_at;
        Ok(())
    }

    pub fn record_read(&mut self, line: LineAddr) -> Result<(), TxError> {
        if !self.active {
            return Err(TxError::Inactive);
        }
        self.read_set.insert(line);
        Ok(())
    }

    /// Called for every L3 eviction. Cache state is never rolled back; only
    /// the transaction itself ends.
    pub fn check_abort(&mut self, evicted: LineAddr, now: u64, delivery_latency: u64) -> Option<AbortInfo> {
        if !self.active || !self.read_set.contains(&evicted) {
            return None;
        }
        let info = AbortInfo {
            reason: AbortReason::ReadSetEvicted,
            timestamp: now + delivery_latency,
            cause_cycle: now,
            evicted: Some(evicted),
        };
        self.finish(info);
        Some(info)
    }

    /// Fires a pending spontaneous abort whose time is `<= now`.
    pub fn poll_spontaneous(&mut self, now: u64) -> Option<AbortInfo> {
        match self.spontaneous_at {
            Some(at) if self.active && at <= now => {
                let info = AbortInfo {
                    reason: AbortReason::Spontaneous,
                    timestamp: at,
                    cause_cycle: at,
                    evicted: None,
                };
                self.finish(info);
                Some(info)
            }
            _ => None,
        }
    }

    pub fn reschedule_spontaneous(&mut self, at: Option<u64>) {
        if self.active {
            self.spontaneous_at = at;
        }
    }

    /// Commits the transaction without an abort.
    pub fn end(&mut self) -> Result<(), TxError> {
        if !self.active {
            return Err(TxError::Inactive);
        }
        self.active = false;
        self.read_set.clear();
        self.spontaneous_at = None;
        Ok(())
    }

    fn finish(&mut self, info: AbortInfo) {
        self.active = false;
        self.read_set.clear();
        self.spontaneous_at = None;
        self.abort = Some(info);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn begin_twice_is_nested() {
        let mut tx = Transaction::default();
        tx.begin(None).unwrap();
        assert!(tx.is_active() && tx.read_set().is_empty());
        assert_eq!(tx.begin(None), Err(TxError::Nested));
    }

    #[test]
    fn read_requires_active() {
        let mut tx = Transaction::default();
        assert_eq!(tx.record_read(LineAddr(1)), Err(TxError::Inactive));
    }

    #[test]
    fn read_set_is_a_set() {
        let mut tx = Transaction::default();
        tx.begin(None).unwrap();
        for i in 0..12 {
            tx.record_read(LineAddr(i)).unwrap();
        }
        tx.record_read(LineAddr(3)).unwrap();
        assert_eq!(tx.read_set().len(), 12);
    }

    #[test]
    fn only_read_set_evictions_abort_and_only_once() {
        let mut tx = Transaction::default();
        tx.begin(None).unwrap();
        tx.record_read(LineAddr(7)).unwrap();
        tx.record_read(LineAddr(8)).unwrap();
        assert!(tx.check_abort(LineAddr(9), 100, 180).is_none());
        let info = tx.check_abort(LineAddr(7), 100, 180).unwrap();
        assert_eq!(info.reason, AbortReason::ReadSetEvicted);
        assert_eq!(info.timestamp, 280);
        assert!(!tx.is_active());
        assert!(tx.check_abort(LineAddr(8), 120, 180).is_none());
        assert_eq!(tx.abort_info(), Some(info));
    }

    #[test]
    fn spontaneous_fires_at_its_time() {
        let mut tx = Transaction::default();
        tx.begin(Some(500)).unwrap();
        assert!(tx.poll_spontaneous(499).is_none());
        let info = tx.poll_spontaneous(600).unwrap();
        assert_eq!(info.reason, AbortReason::Spontaneous);
        assert_eq!(info.timestamp, 500);
    }
}
