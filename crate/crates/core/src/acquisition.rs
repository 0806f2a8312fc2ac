//! Change-log acquisition, symptom rules and per-signal statistics.
//!
//! A [`ChangeLog`] holds one record per observed value change, sorted by
//! time and then by signal declaration index. The first snapshot of a run is
//! logged in full at its time stamp.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

use crate::faults::ClassLabel;
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChangeRecord {
    pub time_ms: Millis,
    /// Index into the log header's signal list.
    pub signal: usize,
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeLog {
    pub signals: Vec<String>,
    pub scan_ms: Millis,
    pub label: Option<ClassLabel>,
    /// Injection time of the scenario fault, if any.
    pub inject_ms: Option<Millis>,
    pub records: Vec<ChangeRecord>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("snapshot width {found} differs from {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("snapshot at {found} ms precedes {previous} ms")]
    TimeReversal { previous: Millis, found: Millis },
    #[error("log is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unknown signal `{0}`")]
    UnknownSignal(String),
}

/// Sequential fold turning time-stamped observed snapshots into records.
#[derive(Debug, Clone)]
pub struct Recorder {
    log: ChangeLog,
    last: Option<(Millis, Vec<bool>)>,
}

impl Recorder {
    pub fn new(signals: Vec<String>, scan_ms: Millis) -> Self {
        Recorder {
            log: ChangeLog {
                signals,
                scan_ms,
                label: None,
                inject_ms: None,
                records: Vec::new(),
            },
            last: None,
        }
    }

    pub fn push(&mut self, time_ms: Millis, snapshot: &[bool]) -> Result<(), LogError> {
        let width = self.log.signals.len();
        if snapshot.len() != width {
            return Err(LogError::WidthMismatch { expected: width, found: snapshot.len() });
        }
        match &mut self.last {
            None => {
                self.log.records.extend(snapshot.iter().enumerate().map(|(signal, &value)| {
                    ChangeRecord { time_ms, signal, value }
                }));
                self.last = Some((time_ms, snapshot.to_vec()));
            }
            Some((prev_t, prev)) => {
                if time_ms < *prev_t {
                    return Err(LogError::TimeReversal { previous: *prev_t, found: time_ms });
                }
                for (signal, (&new, old)) in snapshot.iter().zip(prev.iter_mut()).enumerate() {
                    if new != *old {
                        self.log.records.push(ChangeRecord { time_ms, signal, value: new });
                        *old = new;
                    }
                }
                *prev_t = time_ms;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> ChangeLog {
        self.log
    }
}

/// Records a whole snapshot stream.
pub fn record<'a, I>(signals: Vec<String>, scan_ms: Millis, stream: I) -> Result<ChangeLog, LogError>
where
    I: IntoIterator<Item = (Millis, &'a [bool])>,
{
    let mut rec = Recorder::new(signals, scan_ms);
    for (t, snap) in stream {
        rec.push(t, snap)?;
    }
    Ok(rec.finish())
}

impl ChangeLog {
    pub fn width(&self) -> usize {
        self.signals.len()
    }

    pub fn signal_index(&self, name: &str) -> Option<usize> {
        self.signals.iter().position(|s| s == name)
    }

    /// Last-value-hold snapshot at every distinct record time.
    pub fn snapshots(&self) -> Vec<(Millis, Vec<bool>)> {
        let mut out: Vec<(Millis, Vec<bool>)> = Vec::new();
        let mut current = vec![false; self.width()];
        for r in &self.records {
            current[r.signal] = r.value;
            match out.last_mut() {
                Some((t, snap)) if *t == r.time_ms => snap[r.signal] = r.value,
                _ => out.push((r.time_ms, current.clone())),
            }
        }
        out
    }

    /// Records for one signal, in time order.
    pub fn signal_records(&self, signal: usize) -> impl Iterator<Item = &ChangeRecord> {
        self.records.iter().filter(move |r| r.signal == signal)
    }

    /// Checks ordering, alternation and that the first time stamp logs
    /// every signal.
    pub fn validate(&self) -> Result<(), LogError> {
        let first_t = self.records.first().ok_or(LogError::Empty)?.time_ms;
        let mut last: Vec<Option<bool>> = vec![None; self.width()];
        let mut prev: Option<(Millis, usize)> = None;
        for (i, r) in self.records.iter().enumerate() {
            let err = |message: String| LogError::Format { line: i + 1, message };
            if r.signal >= self.width() {
                return Err(err(format!("signal index {} out of range", r.signal)));
            }
            if let Some(p) = prev {
                if (r.time_ms, r.signal) <= p {
                    return Err(err("records out of (time, signal) order".into()));
                }
            }
            match last[r.signal] {
                None if r.time_ms != first_t => {
                    return Err(err(format!("signal `{}` missing from initial snapshot", self.signals[r.signal])))
                }
                Some(v) if v == r.value => {
                    return Err(err(format!("signal `{}` repeats value", self.signals[r.signal])))
                }
                _ => {}
            }
            last[r.signal] = Some(r.value);
            prev = Some((r.time_ms, r.signal));
        }
        if let Some(missing) = last.iter().position(Option::is_none) {
            return Err(LogError::Format {
                line: 0,
                message: format!("signal `{}` never logged", self.signals[missing]),
            });
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# signals: {}", self.signals.join(",")).unwrap();
        writeln!(out, "# scan_ms: {}", self.scan_ms).unwrap();
        match self.label {
            Some(l) => writeln!(out, "# label: {l}").unwrap(),
            None => writeln!(out, "# label: unlabeled").unwrap(),
        }
        if let Some(t) = self.inject_ms {
            writeln!(out, "# inject_ms: {t}").unwrap();
        }
        out.push_str("time_ms,variable,value\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.time_ms, self.signals[r.signal], u8::from(r.value)).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ChangeLog, LogError> {
        let mut signals: Option<Vec<String>> = None;
        let mut scan_ms = None;
        let mut label = None;
        let mut inject_ms = None;
        let mut records = Vec::new();
        let mut record_lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| LogError::Format { line: line_no, message };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let Some((key, value)) = comment.split_once(':') else { continue };
                let value = value.trim();
                match key.trim() {
                    "signals" => {
                        signals = Some(value.split(',').map(|s| s.trim().to_string()).collect())
                    }
                    "scan_ms" => {
                        scan_ms = Some(value.parse().map_err(|_| err(format!("bad scan_ms `{value}`")))?)
                    }
                    "label" if value == "unlabeled" => label = None,
                    "label" => {
                        let idx: usize = value.parse().map_err(|_| err(format!("bad label `{value}`")))?;
                        label = Some(ClassLabel::new(idx).map_err(|e| err(e.to_string()))?);
                    }
                    "inject_ms" => {
                        inject_ms = Some(value.parse().map_err(|_| err(format!("bad inject_ms `{value}`")))?)
                    }
                    _ => {}
                }
                continue;
            }
            if line == "time_ms,variable,value" {
                continue;
            }
            let names = signals.as_ref().ok_or_else(|| err("row before `# signals:` header".into()))?;
            let fields: Vec<&str> = line.split(',').collect();
            let [t, var, v] = fields.as_slice() else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let time_ms = t.trim().parse().map_err(|_| err(format!("bad time `{t}`")))?;
            let signal = names
                .iter()
                .position(|n| n == var.trim())
                .ok_or_else(|| err(format!("variable `{var}` not declared in header")))?;
            let value = match v.trim() {
                "0" => false,
                "1" => true,
                other => return Err(err(format!("bad value `{other}`"))),
            };
            records.push(ChangeRecord { time_ms, signal, value });
            record_lines.push(line_no);
        }
        let log = ChangeLog {
            signals: signals.ok_or(LogError::Format { line: 0, message: "missing `# signals:` header".into() })?,
            scan_ms: scan_ms.ok_or(LogError::Format { line: 0, message: "missing `# scan_ms:` header".into() })?,
            label,
            inject_ms,
            records,
        };
        // validate() numbers records from 1; report file lines instead
        log.validate().map_err(|e| match e {
            LogError::Format { line, message } if line > 0 => {
                LogError::Format { line: record_lines[line - 1], message }
            }
            other => other,
        })?;
        Ok(log)
    }
}

// ---------------------------------------------------------------------------
// Symptoms

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub signal: usize,
    pub rising: bool,
}

/// "`expected` must follow `antecedent` within `timeout_ms`".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymptomRule {
    pub antecedent: Edge,
    pub expected: Edge,
    pub timeout_ms: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Symptom {
    pub rule: SymptomRule,
    pub antecedent_time_ms: Millis,
    pub deadline_ms: Millis,
}

impl ChangeLog {
    /// Times of a given edge; the initial snapshot carries no edges.
    pub fn edge_times(&self, edge: Edge) -> Vec<Millis> {
        let first_t = self.records.first().map(|r| r.time_ms);
        self.signal_records(edge.signal)
            .filter(|r| Some(r.time_ms) != first_t && r.value == edge.rising)
            .map(|r| r.time_ms)
            .collect()
    }
}

/// Parses `expect <sig>± -> <sig>± within <ms>` lines against a signal list.
pub fn parse_symptom_rules(text: &str, signals: &[String]) -> Result<Vec<SymptomRule>, LogError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |message: String| LogError::Format { line: i + 1, message };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let ["expect", a, "->", b, "within", ms] = words.as_slice() else {
            return Err(err(format!("malformed rule `{line}`")));
        };
        let edge = |w: &str| -> Result<Edge, LogError> {
            let (name, rising) = if let Some(n) = w.strip_suffix('+') {
                (n, true)
            } else if let Some(n) = w.strip_suffix('-') {
                (n, false)
            } else {
                return Err(err(format!("edge `{w}` needs a `+` or `-` suffix")));
            };
            let signal = signals
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| LogError::UnknownSignal(name.to_string()))?;
            Ok(Edge { signal, rising })
        };
        let timeout_ms: Millis = ms.parse().map_err(|_| err(format!("bad timeout `{ms}`")))?;
        if timeout_ms == 0 {
            return Err(err("timeout must be positive".into()));
        }
        out.push(SymptomRule { antecedent: edge(a)?, expected: edge(b)?, timeout_ms });
    }
    Ok(out)
}

/// Reports every antecedent edge left without a matching expected edge
/// within its timeout. Each expected edge is consumed by the earliest
/// still-open antecedent strictly before it.
pub fn detect_symptoms(log: &ChangeLog, rules: &[SymptomRule]) -> Result<Vec<Symptom>, LogError> {
    let mut out = Vec::new();
    for rule in rules {
        for e in [rule.antecedent, rule.expected] {
            if e.signal >= log.width() {
                return Err(LogError::UnknownSignal(format!("#{}", e.signal)));
            }
        }
        let antecedents = log.edge_times(rule.antecedent);
        let expected = log.edge_times(rule.expected);
        let symptom = |t: Millis| Symptom {
            rule: *rule,
            antecedent_time_ms: t,
            deadline_ms: t + rule.timeout_ms,
        };
        let mut open: VecDeque<Millis> = VecDeque::new();
        let mut a = antecedents.iter().peekable();
        for &b in &expected {
            while let Some(&&t) = a.peek() {
                if t < b {
                    open.push_back(t);
                    a.next();
                } else {
                    break;
                }
            }
            while let Some(&t) = open.front() {
                if t + rule.timeout_ms < b {
                    out.push(symptom(t));
                    open.pop_front();
                } else {
                    break;
                }
            }
            open.pop_front();
        }
        out.extend(open.into_iter().chain(a.copied()).map(symptom));
    }
    out.sort_by_key(|s| s.antecedent_time_ms);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq)]
pub struct SignalStats {
    pub name: String,
    /// Changes after the initial snapshot.
    pub changes: usize,
    /// Fraction of the log duration spent at 1.
    pub duty_cycle: f64,
    /// Mean time between consecutive records; absent with a single record.
    pub mean_interval_ms: Option<f64>,
}

/// Per-signal statistics over `[first record, last record]`.
pub fn stats(log: &ChangeLog) -> Result<Vec<SignalStats>, LogError> {
    let start = log.records.first().ok_or(LogError::Empty)?.time_ms;
    let end = log.records.last().map(|r| r.time_ms).unwrap_or(start);
    let duration = (end - start) as f64;
    Ok((0..log.width())
        .map(|s| {
            let recs: Vec<&ChangeRecord> = log.signal_records(s).collect();
            let mut high = 0u64;
            for pair in recs.windows(2) {
                if pair[0].value {
                    high += pair[1].time_ms - pair[0].time_ms;
                }
            }
            let last = recs.last();
            if let Some(r) = last.filter(|r| r.value) {
                high += end - r.time_ms;
            }
            let duty_cycle = if duration > 0.0 {
                high as f64 / duration
            } else if last.is_some_and(|r| r.value) {
                1.0
            } else {
                0.0
            };
            let mean_interval_ms = (recs.len() > 1).then(|| {
                (recs[recs.len() - 1].time_ms - recs[0].time_ms) as f64 / (recs.len() - 1) as f64
            });
            SignalStats {
                name: log.signals[s].clone(),
                changes: recs.len().saturating_sub(1),
                duty_cycle,
                mean_interval_ms,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn constant_stream_logs_only_initial_values() {
        let snap = [true, false, true];
        let log = record(names(3), 100, (0..10).map(|k| (k * 100, &snap[..]))).unwrap();
        assert_eq!(log.records.len(), 3);
        assert!(log.records.iter().all(|r| r.time_ms == 0));
    }

    #[test]
    fn toggling_signal_logs_each_change() {
        let snaps: Vec<[bool; 2]> = (0..4).map(|k| [k % 2 == 1, false]).collect();
        let log = record(names(2), 100, snaps.iter().enumerate().map(|(k, s)| (k as Millis * 100, &s[..]))).unwrap();
        assert_eq!(log.signal_records(0).count(), 4);
        assert_eq!(log.signal_records(1).count(), 1);
        log.validate().unwrap();
    }

    #[test]
    fn width_mismatch_and_time_reversal() {
        let mut rec = Recorder::new(names(2), 100);
        rec.push(0, &[true, true]).unwrap();
        assert_eq!(
            rec.push(100, &[true]),
            Err(LogError::WidthMismatch { expected: 2, found: 1 })
        );
        assert!(matches!(rec.push(0, &[true, true]), Ok(())));
        rec.push(100, &[false, true]).unwrap();
        assert!(matches!(rec.push(50, &[true, true]), Err(LogError::TimeReversal { .. })));
    }

    fn edge_log(a_rises: &[Millis], b_rises: &[Millis]) -> ChangeLog {
        let mut events: Vec<(Millis, usize)> = a_rises
            .iter()
            .map(|&t| (t, 0))
            .chain(b_rises.iter().map(|&t| (t, 1)))
            .collect();
        events.sort();
        let mut rec = Recorder::new(names(2), 10);
        let mut v = [false, false];
        rec.push(0, &v).unwrap();
        // each rise is followed by a fall 10 ms later
        let mut t_events: Vec<(Millis, usize, bool)> = Vec::new();
        for (t, s) in events {
            t_events.push((t, s, true));
            t_events.push((t + 10, s, false));
        }
        t_events.sort();
        for (t, s, val) in t_events {
            v[s] = val;
            rec.push(t, &v).unwrap();
        }
        rec.finish()
    }

    fn rule() -> SymptomRule {
        SymptomRule {
            antecedent: Edge { signal: 0, rising: true },
            expected: Edge { signal: 1, rising: true },
            timeout_ms: 500,
        }
    }

    #[test]
    fn symptom_expectation_met() {
        let log = edge_log(&[100], &[300]);
        assert!(detect_symptoms(&log, &[rule()]).unwrap().is_empty());
    }

    #[test]
    fn symptom_when_expected_edge_missing() {
        let log = edge_log(&[100], &[]);
        let s = detect_symptoms(&log, &[rule()]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].antecedent_time_ms, 100);
        assert_eq!(s[0].deadline_ms, 600);
    }

    #[test]
    fn earliest_unmatched_antecedent_is_consumed() {
        // Hand enumeration: B@250 can serve A@100 or A@200; the policy
        // assigns it to A@100, leaving A@200 open until its deadline 700.
        let log = edge_log(&[100, 200], &[250]);
        let s = detect_symptoms(&log, &[rule()]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].antecedent_time_ms, 200);
        assert_eq!(s[0].deadline_ms, 700);
    }

    #[test]
    fn late_expected_edge_does_not_rescue_expired_antecedent() {
        let log = edge_log(&[100, 900], &[1000]);
        let s = detect_symptoms(&log, &[rule()]).unwrap();
        assert_eq!(s.iter().map(|s| s.antecedent_time_ms).collect::<Vec<_>>(), [100]);
    }

    #[test]
    fn symptom_rule_file() {
        let sig = names(3);
        let rules = parse_symptom_rules("# r\nexpect s0+ -> s2- within 400\n", &sig).unwrap();
        assert_eq!(rules[0].antecedent, Edge { signal: 0, rising: true });
        assert_eq!(rules[0].expected, Edge { signal: 2, rising: false });
        assert_eq!(
            parse_symptom_rules("expect s9+ -> s2- within 400\n", &sig),
            Err(LogError::UnknownSignal("s9".into()))
        );
        assert!(parse_symptom_rules("expect s0 -> s2- within 400\n", &sig).is_err());
        assert!(parse_symptom_rules("expect s0+ -> s2- within 0\n", &sig).is_err());
    }

    #[test]
    fn stats_duty_cycle_and_intervals() {
        let snaps = [[true, false], [true, true], [true, false]];
        let log = record(names(2), 100, snaps.iter().enumerate().map(|(k, s)| (k as Millis * 100, &s[..]))).unwrap();
        let st = stats(&log).unwrap();
        assert_eq!(st[0].duty_cycle, 1.0);
        assert_eq!(st[0].changes, 0);
        assert_eq!(st[0].mean_interval_ms, None);
        // 0 -> 1 -> 0 at t = 0, 100, 200 over a 200 ms log
        assert_eq!(st[1].duty_cycle, 0.5);
        assert_eq!(st[1].changes, 2);
        assert_eq!(st[1].mean_interval_ms, Some(100.0));
        let empty = ChangeLog { signals: names(1), scan_ms: 1, label: None, inject_ms: None, records: vec![] };
        assert_eq!(stats(&empty), Err(LogError::Empty));
    }

    #[test]
    fn csv_round_trip_and_rejections() {
        let snaps = [[true, false], [false, true], [false, false]];
        let mut log = record(names(2), 100, snaps.iter().enumerate().map(|(k, s)| (k as Millis * 100, &s[..]))).unwrap();
        log.label = Some(ClassLabel::new(3).unwrap());
        log.inject_ms = Some(150);
        let text = log.to_csv();
        assert!(text.starts_with("# signals: s0,s1\n# scan_ms: 100\n# label: 3\n"));
        assert_eq!(ChangeLog::from_csv(&text).unwrap(), log);

        let bad = "# signals: a\n# scan_ms: 10\n# label: unlabeled\n0,a,1\n5,a,1\n";
        assert!(matches!(ChangeLog::from_csv(bad), Err(LogError::Format { line: 5, .. })));
        let undeclared = "# signals: a\n# scan_ms: 10\n# label: 0\n0,b,1\n";
        assert!(ChangeLog::from_csv(undeclared).is_err());
        let unsorted = "# signals: a,b\n# scan_ms: 10\n# label: 0\n0,b,1\n0,a,1\n";
        assert!(ChangeLog::from_csv(unsorted).is_err());
    }
}
