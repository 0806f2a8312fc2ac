//! Timed input/output vectors, last-N windows and stratified k-fold splits.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::acquisition::ChangeLog;
use crate::faults::{label_for, ClassLabel, FaultSpec, LabelCatalog, NUM_CLASSES};
use crate::Millis;

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_FOLDS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("log is empty")]
    EmptyLog,
    #[error("run too short for window length: {vectors} vectors < N = {window}")]
    RunTooShort { vectors: usize, window: usize },
    #[error("window length and stride must be at least 1")]
    BadWindow,
    #[error("k = {k} folds need at least k samples and k >= 2 (have {samples})")]
    BadFolds { k: usize, samples: usize },
    #[error("time scaling constant must be positive")]
    BadScale,
    #[error("sample shape {found:?} differs from dataset shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Fault(#[from] crate::faults::FaultError),
}

/// Full boolean snapshot plus the time since the previous snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedIOVector {
    pub t_rel: f64,
    pub values: Vec<bool>,
}

/// One vector per distinct change time of the log.
pub fn vectorize(log: &ChangeLog) -> Result<Vec<TimedIOVector>, DatasetError> {
    let snaps = log.snapshots();
    if snaps.is_empty() {
        return Err(DatasetError::EmptyLog);
    }
    let mut prev = snaps[0].0;
    Ok(snaps
        .into_iter()
        .map(|(t, values)| {
            let t_rel = (t - prev) as f64;
            prev = t;
            TimedIOVector { t_rel, values }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeScaling {
    None,
    Divide(f64),
    Log1p,
}

impl Default for TimeScaling {
    fn default() -> Self {
        TimeScaling::Divide(1000.0)
    }
}

impl TimeScaling {
    pub fn validate(self) -> Result<Self, DatasetError> {
        match self {
            TimeScaling::Divide(c) if !(c > 0.0 && c.is_finite()) => Err(DatasetError::BadScale),
            s => Ok(s),
        }
    }

    pub fn apply(self, t_rel: f64) -> f64 {
        match self {
            TimeScaling::None => t_rel,
            TimeScaling::Divide(c) => t_rel / c,
            TimeScaling::Log1p => t_rel.ln_1p(),
        }
    }
}

impl std::fmt::Display for TimeScaling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeScaling::None => f.write_str("none"),
            TimeScaling::Divide(c) => write!(f, "divide:{c}"),
            TimeScaling::Log1p => f.write_str("log1p"),
        }
    }
}

impl FromStr for TimeScaling {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed = match s {
            "none" => TimeScaling::None,
            "log1p" => TimeScaling::Log1p,
            _ => {
                let c = s
                    .strip_prefix("divide:")
                    .and_then(|c| c.parse().ok())
                    .ok_or(DatasetError::BadScale)?;
                TimeScaling::Divide(c)
            }
        };
        parsed.validate()
    }
}

/// Rescales `t_rel` only; boolean values are left untouched.
pub fn normalize_time(vectors: &[TimedIOVector], scale: TimeScaling) -> Result<Vec<TimedIOVector>, DatasetError> {
    let scale = scale.validate()?;
    Ok(vectors
        .iter()
        .map(|v| TimedIOVector { t_rel: scale.apply(v.t_rel), values: v.values.clone() })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub window: Vec<TimedIOVector>,
    pub label: ClassLabel,
}

/// Number of windows of length `n` with step `stride` over `len` vectors.
pub fn window_count(len: usize, n: usize, stride: usize) -> usize {
    if n == 0 || stride == 0 || len < n {
        0
    } else {
        (len - n) / stride + 1
    }
}

fn check_window(len: usize, n: usize, stride: usize) -> Result<(), DatasetError> {
    if n == 0 || stride == 0 {
        return Err(DatasetError::BadWindow);
    }
    if len < n {
        return Err(DatasetError::RunTooShort { vectors: len, window: n });
    }
    Ok(())
}

/// Contiguous windows starting at 0, stride, 2·stride, … all labeled `label`.
pub fn windows(
    vectors: &[TimedIOVector],
    n: usize,
    stride: usize,
    label: ClassLabel,
) -> Result<Vec<WindowSample>, DatasetError> {
    check_window(vectors.len(), n, stride)?;
    Ok((0..window_count(vectors.len(), n, stride))
        .map(|k| WindowSample { window: vectors[k * stride..k * stride + n].to_vec(), label })
        .collect())
}

/// Windows of a fault run: those ending before the injection time are
/// normal, the rest carry the fault's class. Absolute time is the running
/// sum of `t_rel`.
pub fn label_windows_for_fault(
    vectors: &[TimedIOVector],
    n: usize,
    stride: usize,
    fault: Option<&FaultSpec>,
    catalog: &LabelCatalog,
) -> Result<Vec<WindowSample>, DatasetError> {
    let label = label_for(&fault.iter().cloned().cloned().collect::<Vec<_>>(), catalog)?;
    label_windows(vectors, n, stride, label, fault.map(|f| f.inject_time_ms))
}

/// Same split as [`label_windows_for_fault`] from a label and an optional
/// injection time, as recorded in a labeled log's header.
pub fn label_windows(
    vectors: &[TimedIOVector],
    n: usize,
    stride: usize,
    label: ClassLabel,
    inject_ms: Option<Millis>,
) -> Result<Vec<WindowSample>, DatasetError> {
    let mut samples = windows(vectors, n, stride, label)?;
    if let Some(t) = inject_ms {
        let ends = absolute_times(vectors);
        for (k, s) in samples.iter_mut().enumerate() {
            if ends[k * stride + n - 1] < t as f64 {
                s.label = ClassLabel::NORMAL;
            }
        }
    }
    Ok(samples)
}

/// Cumulative `t_rel`, relative to the first vector.
pub fn absolute_times(vectors: &[TimedIOVector]) -> Vec<f64> {
    vectors
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v.t_rel;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub window: usize,
    pub width: usize,
    pub samples: Vec<WindowSample>,
    /// Run id of every sample.
    pub runs: Vec<usize>,
}

impl Dataset {
    pub fn new(window: usize, width: usize) -> Self {
        Dataset { window, width, samples: Vec::new(), runs: Vec::new() }
    }

    pub fn push_run(&mut self, run: usize, samples: Vec<WindowSample>) -> Result<(), DatasetError> {
        for s in &samples {
            let shape = (s.window.len(), s.window.first().map_or(0, |v| v.values.len()));
            if shape != (self.window, self.width) || s.window.iter().any(|v| v.values.len() != self.width) {
                return Err(DatasetError::ShapeMismatch { expected: (self.window, self.width), found: shape });
            }
        }
        self.runs.extend(std::iter::repeat(run).take(samples.len()));
        self.samples.extend(samples);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for s in &self.samples {
            h[s.label.index()] += 1;
        }
        h
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "N={} width={} count={}", self.window, self.width, self.len()).unwrap();
        for (s, run) in self.samples.iter().zip(&self.runs) {
            writeln!(out, "label={} run={}", s.label, run).unwrap();
            for v in &s.window {
                out.push_str(&v.t_rel.to_string());
                out.push(',');
                out.extend(v.values.iter().map(|&b| if b { '1' } else { '0' }));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset, DatasetError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, message: String| DatasetError::Format { line: line + 1, message };
        let (hl, header) = lines.next().ok_or_else(|| err(0, "missing header".into()))?;
        let mut fields = [None; 3];
        for tok in header.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| err(hl, format!("bad header token `{tok}`")))?;
            let v: usize = v.parse().map_err(|_| err(hl, format!("bad number in `{tok}`")))?;
            match k {
                "N" => fields[0] = Some(v),
                "width" => fields[1] = Some(v),
                "count" => fields[2] = Some(v),
                _ => return Err(err(hl, format!("unknown header key `{k}`"))),
            }
        }
        let [Some(n), Some(width), Some(count)] = fields else {
            return Err(err(hl, "header needs N, width and count".into()));
        };
        if n == 0 {
            return Err(DatasetError::BadWindow);
        }
        let mut ds = Dataset::new(n, width);
        for _ in 0..count {
            let (ll, head) = lines.next().ok_or_else(|| err(usize::MAX - 1, "truncated dataset".into()))?;
            let mut label = None;
            let mut run = ds.samples.len();
            for tok in head.split_whitespace() {
                match tok.split_once('=') {
                    Some(("label", v)) => {
                        let idx: usize = v.parse().map_err(|_| err(ll, format!("bad label `{v}`")))?;
                        label = Some(ClassLabel::new(idx).map_err(|e| err(ll, e.to_string()))?);
                    }
                    Some(("run", v)) => run = v.parse().map_err(|_| err(ll, format!("bad run `{v}`")))?,
                    _ => return Err(err(ll, format!("unexpected `{tok}`"))),
                }
            }
            let label = label.ok_or_else(|| err(ll, "expected `label=<0-7>`".into()))?;
            let mut window = Vec::with_capacity(n);
            for _ in 0..n {
                let (vl, row) = lines.next().ok_or_else(|| err(usize::MAX - 1, "truncated sample".into()))?;
                let (t, bits) = row.trim().split_once(',').ok_or_else(|| err(vl, "expected `t_rel,bits`".into()))?;
                let t_rel: f64 = t.parse().map_err(|_| err(vl, format!("bad t_rel `{t}`")))?;
                if bits.len() != width {
                    return Err(err(vl, format!("expected {width} bits, found {}", bits.len())));
                }
                let values = bits
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(err(vl, format!("bad bit `{c}`"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                window.push(TimedIOVector { t_rel, values });
            }
            ds.samples.push(WindowSample { window, label });
            ds.runs.push(run);
        }
        if let Some((l, _)) = lines.next() {
            return Err(err(l, "trailing data after the declared sample count".into()));
        }
        Ok(ds)
    }
}

/// Fold index of every sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldSplit {
    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Stratified k-fold split. Each class is shuffled under `seed` and dealt
/// round-robin, continuing the rotation from the previous class so overall
/// fold sizes stay within one of each other.
pub fn kfold(labels: &[ClassLabel], k: usize, seed: u64) -> Result<FoldSplit, DatasetError> {
    if k < 2 || k > labels.len() {
        return Err(DatasetError::BadFolds { k, samples: labels.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for class in ClassLabel::all() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldSplit { k, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::record;
    use crate::faults::FaultKind;

    fn log_with_changes(times: &[Millis]) -> ChangeLog {
        let mut v = false;
        let mut snaps = vec![(0, vec![false])];
        for &t in times {
            v = !v;
            snaps.push((t, vec![v]));
        }
        record(vec!["a".into()], 50, snaps.iter().map(|(t, s)| (*t, &s[..]))).unwrap()
    }

    fn vecs(len: usize) -> Vec<TimedIOVector> {
        (0..len)
            .map(|i| TimedIOVector { t_rel: if i == 0 { 0.0 } else { 100.0 }, values: vec![i % 2 == 0] })
            .collect()
    }

    #[test]
    fn single_instant_log() {
        let v = vectorize(&log_with_changes(&[])).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].t_rel, 0.0);
    }

    #[test]
    fn successive_differences() {
        let v = vectorize(&log_with_changes(&[150, 400])).unwrap();
        assert_eq!(v.iter().map(|x| x.t_rel).collect::<Vec<_>>(), [0.0, 150.0, 250.0]);
        assert_eq!(absolute_times(&v), [0.0, 150.0, 400.0]);
    }

    #[test]
    fn window_counts() {
        assert_eq!(windows(&vecs(50), 50, 1, ClassLabel::NORMAL).unwrap().len(), 1);
        // start indices 0, 1, 2
        let w = windows(&vecs(52), 50, 1, ClassLabel::NORMAL).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].window, vecs(52)[2..52]);
        assert_eq!(
            windows(&vecs(10), 50, 1, ClassLabel::NORMAL).unwrap_err(),
            DatasetError::RunTooShort { vectors: 10, window: 50 }
        );
        assert_eq!(windows(&vecs(10), 5, 0, ClassLabel::NORMAL).unwrap_err(), DatasetError::BadWindow);
    }

    #[test]
    fn fault_window_labels() {
        let cat = LabelCatalog::import_station();
        let v = vecs(20); // absolute times 0, 100, ..., 1900
        let late = FaultSpec::new("ie_end", FaultKind::StuckAt1, 10_000, None).unwrap();
        let w = label_windows_for_fault(&v, 5, 1, Some(&late), &cat).unwrap();
        assert!(w.iter().all(|s| s.label == ClassLabel::NORMAL));
        let early = FaultSpec::new("ie_end", FaultKind::StuckAt1, 0, None).unwrap();
        let w = label_windows_for_fault(&v, 5, 1, Some(&early), &cat).unwrap();
        assert!(w.iter().all(|s| s.label.index() == 4));
        // window k ends at (k + 4) * 100; the first end >= 1050 is k = 7
        let mid = FaultSpec::new("ie_end", FaultKind::StuckAt1, 1050, None).unwrap();
        let w = label_windows_for_fault(&v, 5, 1, Some(&mid), &cat).unwrap();
        let labels: Vec<usize> = w.iter().map(|s| s.label.index()).collect();
        assert_eq!(labels[6], 0);
        assert!(labels[7..].iter().all(|&l| l == 4));
        let exact = FaultSpec::new("ie_end", FaultKind::StuckAt1, 1100, None).unwrap();
        let w = label_windows_for_fault(&v, 5, 1, Some(&exact), &cat).unwrap();
        assert_eq!(w[7].label.index(), 4);
        assert_eq!(w[6].label.index(), 0);
    }

    #[test]
    fn time_scaling() {
        let v = vec![TimedIOVector { t_rel: 1000.0, values: vec![true] }];
        assert_eq!(normalize_time(&v, TimeScaling::None).unwrap(), v);
        assert_eq!(normalize_time(&v, TimeScaling::Divide(1000.0)).unwrap()[0].t_rel, 1.0);
        assert_eq!(TimeScaling::Log1p.apply(0.0), 0.0);
        assert_eq!(normalize_time(&v, TimeScaling::Divide(0.0)), Err(DatasetError::BadScale));
        assert_eq!("divide:1000".parse::<TimeScaling>().unwrap(), TimeScaling::Divide(1000.0));
        assert_eq!("log1p".parse::<TimeScaling>().unwrap(), TimeScaling::Log1p);
        assert!("divide:-1".parse::<TimeScaling>().is_err());
    }

    #[test]
    fn perfect_stratification() {
        let labels: Vec<ClassLabel> = (0..9).map(|i| ClassLabel::new(i / 3).unwrap()).collect();
        let split = kfold(&labels, 3, 11).unwrap();
        for fold in 0..3 {
            let mut classes: Vec<usize> = split.validation(fold).iter().map(|&i| labels[i].index()).collect();
            classes.sort();
            assert_eq!(classes, [0, 1, 2]);
        }
        assert_eq!(split, kfold(&labels, 3, 11).unwrap());
        assert!(kfold(&labels, 10, 1).is_err());
        assert!(kfold(&labels, 1, 1).is_err());
    }

    #[test]
    fn dataset_text_round_trip() {
        let mut ds = Dataset::new(2, 1);
        ds.push_run(4, windows(&vecs(3), 2, 1, ClassLabel::new(5).unwrap()).unwrap()).unwrap();
        let text = ds.to_text();
        assert!(text.starts_with("N=2 width=1 count=2\nlabel=5 run=4\n0,1\n100,0\n"));
        assert_eq!(Dataset::from_text(&text).unwrap(), ds);
        assert!(Dataset::from_text("N=2 width=1 count=3\n").is_err());
        let wrong = windows(&vecs(3), 3, 1, ClassLabel::NORMAL).unwrap();
        assert!(matches!(ds.push_run(0, wrong), Err(DatasetError::ShapeMismatch { .. })));
    }
}
