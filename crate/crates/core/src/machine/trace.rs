use std::io::Write;

use serde::Serialize;

use crate::cache_model::Level;

/// Scheduling priority doubles as the tie-break order: at equal cycles the
/// victim runs first, then the attacker, then background noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Victim,
    Attacker,
    Noise,
}

impl ProcessKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProcessKind::Victim => "victim",
            ProcessKind::Attacker => "attacker",
            ProcessKind::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Access,
    Flush,
    Abort,
    RunStart,
    RunEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub process: ProcessKind,
    pub kind: EventKind,
    pub set_index: Option<u64>,
    pub level: Option<Level>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    events: Vec<TraceEvent>,
    cap: usize,
    dropped: u64,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    cycle: u64,
    process_id: &'a str,
    event_kind: EventKind,
    set_index: Option<u64>,
    level_hit: Option<&'a str>,
}

impl EventTrace {
    pub fn with_capacity_limit(cap: usize) -> Self {
        Self {
            events: Vec::new(),
            cap,
            dropped: 0,
        }
    }

    pub fn push(&mut self, ev: TraceEvent) {
        if self.events.len() < self.cap {
            self.events.push(ev);
        } else {
            self.dropped += 1;
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for ev in &self.events {
            w.serialize(TraceRow {
                cycle: ev.cycle,
                process_id: ev.process.as_str(),
                event_kind: ev.kind,
                set_index: ev.set_index,
                level_hit: ev.level.map(Level::as_str),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}
