//! Fault taxonomy, fault masks and the mapping of fault scenarios onto the
//! eight diagnosis classes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::plant::PlantDescription;
use crate::Millis;

pub const NUM_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    StuckAt0,
    StuckAt1,
    /// Unexpected 0 → 1 move for the pulse duration.
    Spurious0to1,
    /// Unexpected 1 → 0 move for the pulse duration.
    Spurious1to0,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] = [
        FaultKind::StuckAt0,
        FaultKind::StuckAt1,
        FaultKind::Spurious0to1,
        FaultKind::Spurious1to0,
    ];

    pub fn is_stuck(self) -> bool {
        matches!(self, FaultKind::StuckAt0 | FaultKind::StuckAt1)
    }

    pub fn keyword(self) -> &'static str {
        match self {
            FaultKind::StuckAt0 => "stuck0",
            FaultKind::StuckAt1 => "stuck1",
            FaultKind::Spurious0to1 => "sp01",
            FaultKind::Spurious1to0 => "sp10",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for FaultKind {
    type Err = FaultError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultKind::ALL
            .into_iter()
            .find(|k| k.keyword() == s)
            .ok_or_else(|| FaultError::Syntax(format!("unknown fault kind `{s}`")))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FaultError {
    #[error("unknown signal `{0}`")]
    UnknownSignal(String),
    #[error("spurious faults need a positive pulse duration")]
    MissingPulse,
    #[error("stuck-at faults take no pulse duration")]
    UnexpectedPulse,
    #[error("signal {0} already carries an active fault")]
    AlreadyFaulted(usize),
    #[error("scenario holds {0} faults; only single-fault scenarios are supported")]
    MultipleFaults(usize),
    #[error("label catalog is empty")]
    EmptyCatalog,
    #[error("class index {0} out of range 0..8")]
    ClassOutOfRange(usize),
    #[error("{0}")]
    Syntax(String),
}

/// One fault bound to a signal and an injection time.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FaultSpec {
    pub target: String,
    pub kind: FaultKind,
    pub inject_time_ms: Millis,
    pulse_ms: Option<Millis>,
}

impl FaultSpec {
    pub fn new(
        target: impl Into<String>,
        kind: FaultKind,
        inject_time_ms: Millis,
        pulse_ms: Option<Millis>,
    ) -> Result<Self, FaultError> {
        match (kind.is_stuck(), pulse_ms) {
            (true, Some(_)) => return Err(FaultError::UnexpectedPulse),
            (false, None) | (false, Some(0)) => return Err(FaultError::MissingPulse),
            _ => {}
        }
        Ok(FaultSpec {
            target: target.into(),
            kind,
            inject_time_ms,
            pulse_ms,
        })
    }

    /// Default pulse for spurious faults: two scan periods.
    pub fn with_default_pulse(
        target: impl Into<String>,
        kind: FaultKind,
        inject_time_ms: Millis,
        scan_period_ms: Millis,
    ) -> Result<Self, FaultError> {
        let pulse = (!kind.is_stuck()).then_some(2 * scan_period_ms);
        FaultSpec::new(target, kind, inject_time_ms, pulse)
    }

    pub fn pulse_ms(&self) -> Option<Millis> {
        self.pulse_ms
    }

    /// Observed value of a signal whose physical value is `true_value`.
    pub fn mask(&self, true_value: bool, now: Millis) -> bool {
        mask(true_value, Some(self.kind), now, self)
    }
}

/// Scenario-file syntax: `<signal> <kind> at <ms> [for <ms>]`.
impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} at {}", self.target, self.kind, self.inject_time_ms)?;
        if let Some(p) = self.pulse_ms {
            write!(f, " for {p}")?;
        }
        Ok(())
    }
}

/// Applies an (optional) active fault to a physical value at time `now`.
pub fn mask(true_value: bool, fault: Option<FaultKind>, now: Millis, spec: &FaultSpec) -> bool {
    let Some(kind) = fault else { return true_value };
    if now < spec.inject_time_ms {
        return true_value;
    }
    let in_pulse = || {
        spec.pulse_ms
            .is_some_and(|p| now < spec.inject_time_ms.saturating_add(p))
    };
    match kind {
        FaultKind::StuckAt0 => false,
        FaultKind::StuckAt1 => true,
        FaultKind::Spurious0to1 if in_pulse() => true,
        FaultKind::Spurious1to0 if in_pulse() => false,
        FaultKind::Spurious0to1 | FaultKind::Spurious1to0 => true_value,
    }
}

/// Faults currently active, at most one per signal index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActiveFaultSet {
    by_signal: BTreeMap<usize, FaultSpec>,
}

impl ActiveFaultSet {
    pub fn activate(&mut self, signal: usize, spec: FaultSpec) -> Result<(), FaultError> {
        if self.by_signal.contains_key(&signal) {
            return Err(FaultError::AlreadyFaulted(signal));
        }
        self.by_signal.insert(signal, spec);
        Ok(())
    }

    pub fn contains(&self, signal: usize) -> bool {
        self.by_signal.contains_key(&signal)
    }

    pub fn is_empty(&self) -> bool {
        self.by_signal.is_empty()
    }

    pub fn mask(&self, signal: usize, true_value: bool, now: Millis) -> bool {
        match self.by_signal.get(&signal) {
            Some(spec) => spec.mask(true_value, now),
            None => true_value,
        }
    }
}

/// Diagnosis class C_0…C_7; C_0 is normal behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ClassLabel(u8);

impl ClassLabel {
    pub const NORMAL: ClassLabel = ClassLabel(0);
    pub const OTHER_FAULT: ClassLabel = ClassLabel(7);

    pub fn new(index: usize) -> Result<Self, FaultError> {
        if index < NUM_CLASSES {
            Ok(ClassLabel(index as u8))
        } else {
            Err(FaultError::ClassOutOfRange(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = ClassLabel> {
        (0..NUM_CLASSES as u8).map(ClassLabel)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// (signal, kind) pairs bound to C_1…C_6; any other single fault is C_7.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCatalog {
    entries: Vec<(String, FaultKind)>,
}

impl LabelCatalog {
    pub fn new(entries: Vec<(String, FaultKind)>) -> Result<Self, FaultError> {
        if entries.is_empty() {
            return Err(FaultError::EmptyCatalog);
        }
        if entries.len() > NUM_CLASSES - 2 {
            return Err(FaultError::ClassOutOfRange(entries.len()));
        }
        Ok(LabelCatalog { entries })
    }

    /// Entry sensor, end sensor and conveyor motor of the import conveyor,
    /// each stuck at 0 then stuck at 1.
    pub fn import_station() -> Self {
        let mut entries = Vec::new();
        for signal in ["ie_entry", "ie_end", "ie_motor"] {
            entries.push((signal.to_string(), FaultKind::StuckAt0));
            entries.push((signal.to_string(), FaultKind::StuckAt1));
        }
        LabelCatalog { entries }
    }

    pub fn entries(&self) -> &[(String, FaultKind)] {
        &self.entries
    }

    pub fn class_of(&self, target: &str, kind: FaultKind) -> Option<ClassLabel> {
        self.entries
            .iter()
            .position(|(s, k)| s == target && *k == kind)
            .map(|i| ClassLabel(i as u8 + 1))
    }

    /// The (signal, kind) pair bound to a catalog class.
    pub fn entry_for(&self, class: ClassLabel) -> Option<&(String, FaultKind)> {
        class.index().checked_sub(1).and_then(|i| self.entries.get(i))
    }

    pub fn validate_against(&self, plant: &PlantDescription) -> Result<(), FaultError> {
        for (s, _) in &self.entries {
            if plant.index_of(s).is_none() {
                return Err(FaultError::UnknownSignal(s.clone()));
            }
        }
        Ok(())
    }
}

/// Class of a scenario with zero or one fault.
pub fn label_for(scenario_faults: &[FaultSpec], catalog: &LabelCatalog) -> Result<ClassLabel, FaultError> {
    match scenario_faults {
        [] => Ok(ClassLabel::NORMAL),
        [f] => Ok(catalog
            .class_of(&f.target, f.kind)
            .unwrap_or(ClassLabel::OTHER_FAULT)),
        many => Err(FaultError::MultipleFaults(many.len())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub fault: Option<FaultSpec>,
    pub label: ClassLabel,
}

impl Scenario {
    pub fn faults(&self) -> Vec<FaultSpec> {
        self.fault.iter().cloned().collect()
    }
}

/// Window of the run horizon in which injection times are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionWindow {
    pub from_ms: Millis,
    pub to_ms: Millis,
}

impl InjectionWindow {
    /// Uniform over `[lo, hi]` fractions of the horizon, rounded to scans.
    pub fn fraction(horizon_ms: Millis, lo: f64, hi: f64, scan_ms: Millis) -> Self {
        let snap = |x: f64| ((horizon_ms as f64 * x) as Millis / scan_ms) * scan_ms;
        InjectionWindow { from_ms: snap(lo), to_ms: snap(hi).max(snap(lo)) }
    }
}

/// `per_class` scenarios for each of C_0…C_7, in class-major order.
///
/// C_7 scenarios draw a random (signal, kind) pair outside the catalog.
pub fn scenario_suite(
    catalog: &LabelCatalog,
    plant: &PlantDescription,
    per_class: usize,
    injection: InjectionWindow,
    seed: u64,
) -> Result<Vec<Scenario>, FaultError> {
    if catalog.entries.is_empty() {
        return Err(FaultError::EmptyCatalog);
    }
    catalog.validate_against(plant)?;
    let scan = plant.scan_period_ms;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_time = |rng: &mut ChaCha8Rng| {
        let slots = (injection.to_ms - injection.from_ms) / scan;
        injection.from_ms + rng.gen_range(0..=slots) * scan
    };

    let others: Vec<(String, FaultKind)> = plant
        .signals
        .iter()
        .flat_map(|s| FaultKind::ALL.into_iter().map(move |k| (s.name.clone(), k)))
        .filter(|(s, k)| catalog.class_of(s, *k).is_none())
        .collect();

    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in ClassLabel::all() {
        for _ in 0..per_class {
            let fault = match class.index() {
                0 => None,
                7 => {
                    let (s, k) = others.choose(&mut rng).expect("plant has signals").clone();
                    Some(FaultSpec::with_default_pulse(s, k, draw_time(&mut rng), scan)?)
                }
                _ => match catalog.entry_for(class) {
                    Some((s, k)) => Some(FaultSpec::with_default_pulse(s.clone(), *k, draw_time(&mut rng), scan)?),
                    // catalogs shorter than six entries leave classes empty
                    None => continue,
                },
            };
            let label = label_for(&fault.iter().cloned().collect::<Vec<_>>(), catalog)?;
            out.push(Scenario { fault, label });
        }
    }
    Ok(out)
}

/// Parses one scenario-file line: `none` or `<signal> <kind> at <ms> [for <ms>]`.
pub fn parse_scenario_line(line: &str) -> Result<Option<FaultSpec>, FaultError> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let num = |w: &str| {
        w.parse::<Millis>()
            .map_err(|_| FaultError::Syntax(format!("expected milliseconds, found `{w}`")))
    };
    match words.as_slice() {
        ["none"] => Ok(None),
        [target, kind, "at", t] => Ok(Some(FaultSpec::new(*target, kind.parse()?, num(t)?, None)?)),
        [target, kind, "at", t, "for", p] => {
            Ok(Some(FaultSpec::new(*target, kind.parse()?, num(t)?, Some(num(p)?))?))
        }
        _ => Err(FaultError::Syntax(format!("malformed scenario `{line}`"))),
    }
}

/// Parses a scenario file; blank lines and `#` comments are skipped. A
/// spurious fault without `for` gets the default pulse for `scan_ms`.
pub fn parse_scenarios(text: &str, scan_ms: Millis) -> Result<Vec<Option<FaultSpec>>, FaultError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let parsed = match words.as_slice() {
            [target, kind, "at", t] if !kind.parse::<FaultKind>()?.is_stuck() => {
                let t = t
                    .parse()
                    .map_err(|_| FaultError::Syntax(format!("line {}: bad time `{t}`", i + 1)))?;
                Ok(Some(FaultSpec::with_default_pulse(*target, kind.parse()?, t, scan_ms)?))
            }
            _ => parse_scenario_line(line),
        };
        out.push(parsed.map_err(|e| FaultError::Syntax(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn format_scenario(fault: Option<&FaultSpec>) -> String {
    match fault {
        None => "none".to_string(),
        Some(f) => f.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: FaultKind) -> FaultSpec {
        FaultSpec::with_default_pulse("x", kind, 1000, 100).unwrap()
    }

    #[test]
    fn stuck_and_identity_masks() {
        assert!(mask(false, Some(FaultKind::StuckAt1), 1000, &spec(FaultKind::StuckAt1)));
        assert!(!mask(true, Some(FaultKind::StuckAt0), 5000, &spec(FaultKind::StuckAt0)));
        assert!(mask(true, None, 1000, &spec(FaultKind::StuckAt0)));
    }

    #[test]
    fn spurious_pulse_window() {
        let s = spec(FaultKind::Spurious0to1);
        assert_eq!(s.pulse_ms(), Some(200));
        assert!(mask(false, Some(FaultKind::Spurious0to1), 1000, &s));
        assert!(mask(false, Some(FaultKind::Spurious0to1), 1199, &s));
        assert!(!mask(false, Some(FaultKind::Spurious0to1), 1200, &s));
        let s = spec(FaultKind::Spurious1to0);
        assert!(!mask(true, Some(FaultKind::Spurious1to0), 1100, &s));
        assert!(mask(true, Some(FaultKind::Spurious1to0), 1300, &s));
    }

    #[test]
    fn spec_validation() {
        assert_eq!(
            FaultSpec::new("a", FaultKind::Spurious0to1, 0, None),
            Err(FaultError::MissingPulse)
        );
        assert_eq!(
            FaultSpec::new("a", FaultKind::Spurious0to1, 0, Some(0)),
            Err(FaultError::MissingPulse)
        );
        assert_eq!(
            FaultSpec::new("a", FaultKind::StuckAt0, 0, Some(10)),
            Err(FaultError::UnexpectedPulse)
        );
    }

    #[test]
    fn one_fault_per_signal() {
        let mut set = ActiveFaultSet::default();
        set.activate(3, spec(FaultKind::StuckAt0)).unwrap();
        assert_eq!(
            set.activate(3, spec(FaultKind::StuckAt1)),
            Err(FaultError::AlreadyFaulted(3))
        );
        assert!(!set.mask(3, true, 2000));
        assert!(set.mask(2, true, 2000));
    }

    #[test]
    fn labels() {
        let cat = LabelCatalog::import_station();
        assert_eq!(label_for(&[], &cat).unwrap(), ClassLabel::NORMAL);
        let entry1 = FaultSpec::new("ie_entry", FaultKind::StuckAt1, 10, None).unwrap();
        assert_eq!(label_for(&[entry1.clone()], &cat).unwrap().index(), 2);
        let motor0 = FaultSpec::new("ie_motor", FaultKind::StuckAt0, 10, None).unwrap();
        assert_eq!(label_for(&[motor0], &cat).unwrap().index(), 5);
        let other = FaultSpec::new("cc_pallet5", FaultKind::StuckAt0, 10, None).unwrap();
        assert_eq!(label_for(&[other.clone()], &cat).unwrap(), ClassLabel::OTHER_FAULT);
        let spurious = FaultSpec::new("ie_entry", FaultKind::Spurious0to1, 10, Some(200)).unwrap();
        assert_eq!(label_for(&[spurious], &cat).unwrap(), ClassLabel::OTHER_FAULT);
        assert_eq!(label_for(&[entry1, other], &cat), Err(FaultError::MultipleFaults(2)));
        assert_eq!(cat.entry_for(ClassLabel::new(6).unwrap()).unwrap().0, "ie_motor");
        assert!(cat.entry_for(ClassLabel::NORMAL).is_none());
    }

    #[test]
    fn suite_cardinality_and_exclusion() {
        let plant = PlantDescription::import_station();
        let cat = LabelCatalog::import_station();
        let window = InjectionWindow::fraction(30_000, 0.2, 0.5, 100);
        let one = scenario_suite(&cat, &plant, 1, window, 3).unwrap();
        assert_eq!(one.len(), 8);
        let ten = scenario_suite(&cat, &plant, 10, window, 3).unwrap();
        assert_eq!(ten.len(), 80);
        let mut hist = [0usize; NUM_CLASSES];
        for s in &ten {
            hist[s.label.index()] += 1;
            if let Some(f) = &s.fault {
                assert!(f.inject_time_ms >= 6_000 && f.inject_time_ms <= 15_000);
                assert_eq!(f.inject_time_ms % 100, 0);
            }
            if s.label == ClassLabel::OTHER_FAULT {
                let f = s.fault.as_ref().unwrap();
                assert!(cat.class_of(&f.target, f.kind).is_none());
            }
        }
        assert_eq!(hist, [10; NUM_CLASSES]);
        assert_eq!(ten, scenario_suite(&cat, &plant, 10, window, 3).unwrap());
    }

    #[test]
    fn empty_catalog_rejected() {
        assert_eq!(LabelCatalog::new(vec![]), Err(FaultError::EmptyCatalog));
    }

    #[test]
    fn scenario_file_round_trip() {
        let text = "# suite\nnone\nie_entry stuck1 at 12000\ncc_pallet5 sp01 at 500 for 300\nie_end sp10 at 700\n";
        let parsed = parse_scenarios(text, 100).unwrap();
        assert_eq!(parsed.len(), 4);
        assert!(parsed[0].is_none());
        assert_eq!(parsed[3].as_ref().unwrap().pulse_ms(), Some(200));
        let lines: Vec<String> = parsed.iter().map(|f| format_scenario(f.as_ref())).collect();
        assert_eq!(lines[1], "ie_entry stuck1 at 12000");
        assert_eq!(lines[2], "cc_pallet5 sp01 at 500 for 300");
        assert!(parse_scenarios("ie_entry stuck2 at 5\n", 100).is_err());
        assert!(parse_scenarios("ie_entry stuck0 at 5 for 10\n", 100).is_err());
    }
}
