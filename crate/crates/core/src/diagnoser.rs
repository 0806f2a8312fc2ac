//! Online diagnosis over a live stream of timed I/O vectors.
//!
//! The diagnoser keeps the last N vectors and, once the buffer is full,
//! classifies it on every new event. A confidence threshold `tau` turns the
//! eight-class distribution into the three-way plant status: normal, a
//! specific fault, or uncertain.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::acquisition::ChangeLog;
use crate::dataset::{vectorize, DatasetError, TimedIOVector};
use crate::faults::ClassLabel;
use crate::nn::{argmax, Model, NnError};
use crate::Millis;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnoserError {
    #[error("vector has {found} signals, model expects {expected}")]
    Width { expected: usize, found: usize },
    #[error("tau must lie in (0, 1], got {0}")]
    Tau(f64),
    #[error("smoothing window must be at least 1")]
    Smoothing,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Warmup,
    Normal,
    /// Class 1..=7.
    Fault(ClassLabel),
    Uncertain,
}

impl VerdictKind {
    pub fn name(self) -> &'static str {
        match self {
            VerdictKind::Warmup => "warmup",
            VerdictKind::Normal => "normal",
            VerdictKind::Fault(_) => "fault",
            VerdictKind::Uncertain => "uncertain",
        }
    }

    pub fn class(self) -> Option<ClassLabel> {
        match self {
            VerdictKind::Normal => Some(ClassLabel::NORMAL),
            VerdictKind::Fault(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerdictKind::Fault(c) => write!(f, "fault({c})"),
            k => f.write_str(k.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub kind: VerdictKind,
    /// Empty while warming up.
    pub distribution: Vec<f64>,
    pub top_confidence: f64,
}

/// Sliding-buffer diagnoser over a shared read-only model.
#[derive(Debug, Clone)]
pub struct Diagnoser<'m> {
    model: &'m Model,
    buffer: VecDeque<TimedIOVector>,
    tau: f64,
    smoothing: Option<usize>,
    recent: VecDeque<VerdictKind>,
}

impl<'m> Diagnoser<'m> {
    pub fn new(model: &'m Model, tau: f64) -> Result<Self, DiagnoserError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(DiagnoserError::Tau(tau));
        }
        Ok(Diagnoser {
            model,
            buffer: VecDeque::with_capacity(model.config.window),
            tau,
            smoothing: None,
            recent: VecDeque::new(),
        })
    }

    /// Majority vote over the last `k` full-buffer verdicts; ties go to the
    /// most recent kind among the tied ones. Off unless enabled here. With
    /// smoothing on, a reported kind may disagree with its own confidence.
    pub fn with_smoothing(mut self, k: usize) -> Result<Self, DiagnoserError> {
        if k == 0 {
            return Err(DiagnoserError::Smoothing);
        }
        self.smoothing = Some(k);
        Ok(self)
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn push(&mut self, vector: TimedIOVector) -> Result<Verdict, DiagnoserError> {
        let cfg = &self.model.config;
        if vector.values.len() != cfg.width() {
            return Err(DiagnoserError::Width { expected: cfg.width(), found: vector.values.len() });
        }
        if self.buffer.len() == cfg.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(vector);
        if self.buffer.len() < cfg.window {
            return Ok(Verdict { kind: VerdictKind::Warmup, distribution: Vec::new(), top_confidence: 0.0 });
        }
        let window: Vec<TimedIOVector> = self.buffer.iter().cloned().collect();
        let distribution = self.model.forward(&window)?;
        let top = argmax(&distribution);
        let top_confidence = distribution[top.index()];
        let raw = if top_confidence < self.tau {
            VerdictKind::Uncertain
        } else if top == ClassLabel::NORMAL {
            VerdictKind::Normal
        } else {
            VerdictKind::Fault(top)
        };
        let kind = match self.smoothing {
            None => raw,
            Some(k) => {
                if self.recent.len() == k {
                    self.recent.pop_front();
                }
                self.recent.push_back(raw);
                majority(&self.recent)
            }
        };
        Ok(Verdict { kind, distribution, top_confidence })
    }
}

fn majority(recent: &VecDeque<VerdictKind>) -> VerdictKind {
    let count = |k: VerdictKind| recent.iter().filter(|&&r| r == k).count();
    let best = recent.iter().map(|&k| count(k)).max().unwrap_or(0);
    *recent.iter().rev().find(|&&k| count(k) == best).expect("non-empty vote window")
}

/// Pushes every vector of `log` through a fresh diagnoser; one verdict per
/// vector, stamped with the vector's absolute log time.
pub fn replay(log: &ChangeLog, model: &Model, tau: f64) -> Result<Vec<(Millis, Verdict)>, DiagnoserError> {
    let mut diagnoser = Diagnoser::new(model, tau)?;
    replay_with(log, &mut diagnoser)
}

pub fn replay_with(log: &ChangeLog, diagnoser: &mut Diagnoser) -> Result<Vec<(Millis, Verdict)>, DiagnoserError> {
    let vectors = vectorize(log)?;
    let mut now = log.records.first().map_or(0, |r| r.time_ms);
    let mut out = Vec::with_capacity(vectors.len());
    for v in vectors {
        now += v.t_rel as Millis;
        out.push((now, diagnoser.push(v)?));
    }
    Ok(out)
}

/// Time from injection to the first `Fault(class)` verdict at or after it.
pub fn latency(verdicts: &[(Millis, Verdict)], inject_ms: Millis, class: ClassLabel) -> Option<Millis> {
    verdicts
        .iter()
        .find(|(t, v)| *t >= inject_ms && v.kind == VerdictKind::Fault(class))
        .map(|(t, _)| t - inject_ms)
}

/// Verdict kinds with consecutive repeats collapsed.
pub fn transitions(verdicts: &[(Millis, Verdict)]) -> Vec<VerdictKind> {
    let mut out: Vec<VerdictKind> = Vec::new();
    for (_, v) in verdicts {
        if out.last() != Some(&v.kind) {
            out.push(v.kind);
        }
    }
    out
}

/// `time_ms,kind,class,confidence` rows; class and confidence are empty for
/// warmup verdicts.
pub fn format_verdicts(verdicts: &[(Millis, Verdict)]) -> String {
    let mut out = String::from("time_ms,kind,class,confidence\n");
    for (t, v) in verdicts {
        match v.kind {
            VerdictKind::Warmup => out.push_str(&format!("{t},warmup,,\n")),
            kind => {
                // uncertain rows report the leading candidate
                let class = kind.class().unwrap_or_else(|| argmax(&v.distribution));
                out.push_str(&format!("{t},{},{class},{:.6}\n", kind.name(), v.top_confidence));
            }
        }
    }
    out
}
