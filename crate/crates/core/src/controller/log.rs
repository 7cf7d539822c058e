//! Append-only decision log: `timestamp,state,vm_id,action,cpulist`.

use std::io::{self, Write};

use super::{Action, StateName};
use crate::cpulist::format_cpulist;

pub const DECISION_LOG_HEADER: &str = "timestamp,state,vm_id,action,cpulist";

/// One logged decision. `timestamp` is seconds since the start of the run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub timestamp: f64,
    pub state: StateName,
    pub vm_id: String,
    pub action: &'static str,
    pub cpulist: String,
}

impl DecisionRecord {
    pub fn from_action(timestamp: f64, state: StateName, action: &Action) -> Self {
        match action {
            Action::Bind { vm, cores, .. } => DecisionRecord {
                timestamp,
                state,
                vm_id: vm.to_string(),
                action: "BIND",
                cpulist: format_cpulist(cores).unwrap_or_default(),
            },
            Action::NoOp => DecisionRecord::no_op(timestamp, state),
        }
    }

    pub fn no_op(timestamp: f64, state: StateName) -> Self {
        DecisionRecord {
            timestamp,
            state,
            vm_id: String::new(),
            action: "NO_OP",
            cpulist: String::new(),
        }
    }

    /// CSV line without the trailing newline. The cpulist is quoted when it
    /// contains a comma.
    pub fn to_csv(&self) -> String {
        let list = if self.cpulist.contains(',') {
            format!("\"{}\"", self.cpulist)
        } else {
            self.cpulist.clone()
        };
        format!("{:.3},{},{},{},{}", self.timestamp, self.state, self.vm_id, self.action, list)
    }
}

/// Writes decision records to any sink, header first.
pub struct DecisionLog<W: Write> {
    out: W,
    records: usize,
}

impl<W: Write> DecisionLog<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{DECISION_LOG_HEADER}")?;
        Ok(DecisionLog { out, records: 0 })
    }

    pub fn record(&mut self, rec: &DecisionRecord) -> io::Result<()> {
        writeln!(self.out, "{}", rec.to_csv())?;
        self.records += 1;
        Ok(())
    }

    /// Logs every action of one tick.
    pub fn record_tick(&mut self, timestamp: f64, state: StateName, actions: &[Action]) -> io::Result<()> {
        for a in actions {
            self.record(&DecisionRecord::from_action(timestamp, state, a))?;
        }
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
