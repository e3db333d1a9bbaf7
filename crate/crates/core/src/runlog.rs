//! Line-delimited JSON run logs: one RPC record, screen transition, or rendered
//! screen per line, tagged by a `record` field.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crawler::{FlowRun, ScreenState, ScreenTransition};
use crate::simmesh::RpcRecord;

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error("run log line {line}: {source}")]
    Line { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogLine {
    Rpc(RpcRecord),
    Transition(ScreenTransition),
    Screen(ScreenState),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunLog {
    pub rpcs: Vec<RpcRecord>,
    pub transitions: Vec<ScreenTransition>,
    pub screens: Vec<ScreenState>,
}

impl RunLog {
    pub fn from_run(run: &FlowRun) -> Self {
        Self {
            rpcs: run.log.clone(),
            transitions: run.result.transitions.clone(),
            screens: run.result.screens_mosaic.clone(),
        }
    }

    /// Screens first, then transitions, then RPCs; each group keeps its order.
    pub fn lines(&self) -> impl Iterator<Item = LogLine> + '_ {
        self.screens
            .iter()
            .cloned()
            .map(LogLine::Screen)
            .chain(self.transitions.iter().cloned().map(LogLine::Transition))
            .chain(self.rpcs.iter().cloned().map(LogLine::Rpc))
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for line in self.lines() {
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Blank lines are skipped.
    pub fn read_from(r: impl BufRead) -> Result<Self, RunLogError> {
        let mut log = RunLog::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|source| RunLogError::Line { line: i + 1, source })? {
                LogLine::Rpc(r) => log.rpcs.push(r),
                LogLine::Transition(t) => log.transitions.push(t),
                LogLine::Screen(s) => log.screens.push(s),
            }
        }
        Ok(log)
    }

    pub fn parse(text: &str) -> Result<Self, RunLogError> {
        Self::read_from(text.as_bytes())
    }
}
