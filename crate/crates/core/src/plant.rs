//! Boolean plant model executed under a PLC scan cycle.
//!
//! A plant is a list of signals (sensors driven by the physical process,
//! actuators driven by the control program), a set of timed process rules
//! standing in for the physics, and an ordered control program. One call to
//! [`Simulator::scan`] performs a full PLC cycle: read inputs through the
//! fault mask, execute the program, write outputs through the fault mask,
//! then let the process advance by one scan period.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::acquisition::{ChangeLog, Recorder};
use crate::faults::{ActiveFaultSet, FaultError, FaultSpec};
use crate::Millis;

/// The bundled import-station description.
pub const IMPORT_STATION: &str = include_str!("../data/import_station.plant");

/// Safety valve against zero-delay process loops within a single scan.
const MAX_FIRINGS_PER_SCAN: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalKind {
    Sensor,
    Actuator,
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalKind::Sensor => f.write_str("sensor"),
            SignalKind::Actuator => f.write_str("actuator"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalDef {
    pub name: String,
    pub kind: SignalKind,
    pub initial: bool,
}

/// Boolean guard over signal indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Signal(usize),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, values: &[bool]) -> bool {
        match self {
            Expr::Signal(i) => values[*i],
            Expr::Not(e) => !e.eval(values),
            Expr::And(a, b) => a.eval(values) && b.eval(values),
            Expr::Or(a, b) => a.eval(values) || b.eval(values),
        }
    }

    fn collect_signals(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Signal(i) => out.push(*i),
            Expr::Not(e) => e.collect_signals(out),
            Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect_signals(out);
                b.collect_signals(out);
            }
        }
    }

    /// Signal indices referenced by the expression, in order of appearance.
    pub fn signals(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_signals(&mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub signal: usize,
    pub value: bool,
}

/// Timed physical reaction: once `guard` becomes true on the physical state,
/// `effects` fire after `delay_ms ± jitter_ms` unless the guard drops first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessRule {
    pub guard: Expr,
    pub delay_ms: Millis,
    pub jitter_ms: Millis,
    pub effects: Vec<Assignment>,
}

/// One rung of the control program. Assignments latch: when the guard is
/// false the outputs keep their previous values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlRule {
    pub guard: Expr,
    pub effects: Vec<Assignment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantDescription {
    pub signals: Vec<SignalDef>,
    pub process: Vec<ProcessRule>,
    pub program: Vec<ControlRule>,
    pub scan_period_ms: Millis,
}

impl PlantDescription {
    pub fn width(&self) -> usize {
        self.signals.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.signals.iter().position(|s| s.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.signals.iter().map(|s| s.name.clone()).collect()
    }

    pub fn count(&self, kind: SignalKind) -> usize {
        self.signals.iter().filter(|s| s.kind == kind).count()
    }

    pub fn initial_state(&self) -> PlantState {
        let values: Vec<bool> = self.signals.iter().map(|s| s.initial).collect();
        PlantState {
            true_values: values.clone(),
            observed_values: values.clone(),
            commands: values,
            clock: 0,
            pending: vec![None; self.process.len()],
            enabled: vec![false; self.process.len()],
        }
    }

    /// The bundled import-station plant.
    pub fn import_station() -> PlantDescription {
        parse_plant(IMPORT_STATION).expect("bundled plant description is valid")
    }
}

/// Full simulator state. `commands` is the PLC output image; for sensors it
/// is unused and mirrors the initial value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantState {
    pub true_values: Vec<bool>,
    pub observed_values: Vec<bool>,
    pub commands: Vec<bool>,
    pub clock: Millis,
    /// Fire time of the armed effect of each process rule.
    pub pending: Vec<Option<Millis>>,
    enabled: Vec<bool>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlantError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: duplicate signal `{name}`")]
    DuplicateSignal { line: usize, name: String },
    #[error("line {line}, column {column}: undeclared signal `{name}`")]
    UndeclaredSignal {
        line: usize,
        column: usize,
        name: String,
    },
    #[error("line {line}: control rule drives sensor `{name}`")]
    ControlDrivesSensor { line: usize, name: String },
    #[error("line {line}: process rule drives actuator `{name}`")]
    ProcessDrivesActuator { line: usize, name: String },
    #[error("line {line}: jitter {jitter} ms exceeds delay {delay} ms")]
    NegativeDelay {
        line: usize,
        delay: Millis,
        jitter: Millis,
    },
    #[error("scan period must be positive")]
    ZeroScanPeriod,
    #[error("horizon {horizon} ms is shorter than the scan period {scan} ms")]
    HorizonTooShort { horizon: Millis, scan: Millis },
    #[error(transparent)]
    Fault(#[from] FaultError),
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(u64),
    Not,
    And,
    Or,
    LParen,
    RParen,
    Eq,
    Comma,
    PlusMinus,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    column: usize,
}

fn tokenize(line: &str, line_no: usize) -> Result<Vec<Token>, PlantError> {
    let mut out = Vec::new();
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        match c {
            '#' => break,
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '!' => out.push(Token { tok: Tok::Not, column }),
            '&' => out.push(Token { tok: Tok::And, column }),
            '|' => out.push(Token { tok: Tok::Or, column }),
            '(' => out.push(Token { tok: Tok::LParen, column }),
            ')' => out.push(Token { tok: Tok::RParen, column }),
            '=' => out.push(Token { tok: Tok::Eq, column }),
            ',' => out.push(Token { tok: Tok::Comma, column }),
            '±' => out.push(Token { tok: Tok::PlusMinus, column }),
            '+' if chars.get(i + 1) == Some(&'-') => {
                out.push(Token { tok: Tok::PlusMinus, column });
                i += 2;
                continue;
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let value = text.parse().map_err(|_| PlantError::Syntax {
                    line: line_no,
                    column,
                    message: format!("number `{text}` out of range"),
                })?;
                out.push(Token { tok: Tok::Number(value), column });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    column,
                });
                continue;
            }
            other => {
                return Err(PlantError::Syntax {
                    line: line_no,
                    column,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
        i += 1;
    }
    Ok(out)
}

/// Expression with names still unresolved.
#[derive(Debug, Clone)]
enum RawExpr {
    Name(String, usize),
    Not(Box<RawExpr>),
    And(Box<RawExpr>, Box<RawExpr>),
    Or(Box<RawExpr>, Box<RawExpr>),
}

struct LineParser<'a> {
    tokens: &'a [Token],
    pos: usize,
    line: usize,
    line_len: usize,
}

impl<'a> LineParser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn column(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|t| t.column)
            .unwrap_or(self.line_len + 1)
    }

    fn error(&self, message: impl Into<String>) -> PlantError {
        PlantError::Syntax {
            line: self.line,
            column: self.column(),
            message: message.into(),
        }
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn keyword(&mut self, word: &str) -> Result<(), PlantError> {
        match self.peek() {
            Some(Tok::Ident(w)) if w == word => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.error(format!("expected `{word}`"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize), PlantError> {
        let column = self.column();
        match self.peek() {
            Some(Tok::Ident(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok((w, column))
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, PlantError> {
        match self.peek() {
            Some(Tok::Number(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    fn bit(&mut self) -> Result<bool, PlantError> {
        let column = self.column();
        match self.number("0 or 1")? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(PlantError::Syntax {
                line: self.line,
                column,
                message: "expected 0 or 1".into(),
            }),
        }
    }

    fn end(&self) -> Result<(), PlantError> {
        if self.pos < self.tokens.len() {
            Err(self.error("unexpected trailing input"))
        } else {
            Ok(())
        }
    }

    // expr := term ('|' term)* ; term := factor ('&' factor)* ;
    // factor := '!' factor | '(' expr ')' | name
    fn expr(&mut self) -> Result<RawExpr, PlantError> {
        let mut lhs = self.term()?;
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = RawExpr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<RawExpr, PlantError> {
        let mut lhs = self.factor()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = RawExpr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<RawExpr, PlantError> {
        match self.peek() {
            Some(Tok::Not) => {
                self.pos += 1;
                Ok(RawExpr::Not(Box::new(self.factor()?)))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(Tok::Ident(w)) if w == "after" || w == "set" => {
                Err(self.error("expected signal name"))
            }
            Some(Tok::Ident(_)) => {
                let (name, column) = self.ident("signal name")?;
                Ok(RawExpr::Name(name, column))
            }
            _ => Err(self.error("expected signal name, `!` or `(`")),
        }
    }

    fn assignments(&mut self) -> Result<Vec<(String, usize, bool)>, PlantError> {
        let mut out = Vec::new();
        loop {
            let (name, column) = self.ident("signal name")?;
            if self.next().map(|t| t.tok) != Some(Tok::Eq) {
                self.pos -= 1;
                return Err(self.error("expected `=`"));
            }
            let value = self.bit()?;
            out.push((name, column, value));
            if self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
            } else {
                return Ok(out);
            }
        }
    }
}

enum RawRule {
    Process {
        line: usize,
        guard: RawExpr,
        delay: Millis,
        jitter: Millis,
        effects: Vec<(String, usize, bool)>,
    },
    Control {
        line: usize,
        guard: RawExpr,
        effects: Vec<(String, usize, bool)>,
    },
}

/// Parses and validates a plant-description document.
pub fn parse_plant(text: &str) -> Result<PlantDescription, PlantError> {
    let mut signals: Vec<SignalDef> = Vec::new();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    let mut raw_rules = Vec::new();
    let mut scan_period_ms = None;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tokens = tokenize(line, line_no)?;
        if tokens.is_empty() {
            continue;
        }
        let mut p = LineParser {
            tokens: &tokens,
            pos: 0,
            line: line_no,
            line_len: line.chars().count(),
        };
        let (head, _) = p.ident("a declaration keyword")?;
        match head.as_str() {
            "signal" => {
                let (name, _) = p.ident("signal name")?;
                let (kind, column) = p.ident("`sensor` or `actuator`")?;
                let kind = match kind.as_str() {
                    "sensor" => SignalKind::Sensor,
                    "actuator" => SignalKind::Actuator,
                    _ => {
                        return Err(PlantError::Syntax {
                            line: line_no,
                            column,
                            message: "expected `sensor` or `actuator`".into(),
                        })
                    }
                };
                p.keyword("init")?;
                let initial = p.bit()?;
                p.end()?;
                if by_name.contains_key(&name) {
                    return Err(PlantError::DuplicateSignal { line: line_no, name });
                }
                by_name.insert(name.clone(), signals.len());
                signals.push(SignalDef { name, kind, initial });
            }
            "process" => {
                p.keyword("when")?;
                let guard = p.expr()?;
                p.keyword("after")?;
                let delay = p.number("delay in ms")?;
                let jitter = if p.peek() == Some(&Tok::PlusMinus) {
                    p.pos += 1;
                    p.number("jitter in ms")?
                } else {
                    0
                };
                p.keyword("set")?;
                let effects = p.assignments()?;
                p.end()?;
                if jitter > delay {
                    return Err(PlantError::NegativeDelay { line: line_no, delay, jitter });
                }
                raw_rules.push(RawRule::Process { line: line_no, guard, delay, jitter, effects });
            }
            "control" => {
                p.keyword("when")?;
                let guard = p.expr()?;
                p.keyword("set")?;
                let effects = p.assignments()?;
                p.end()?;
                raw_rules.push(RawRule::Control { line: line_no, guard, effects });
            }
            "scan" => {
                let period = p.number("scan period in ms")?;
                p.end()?;
                if period == 0 {
                    return Err(PlantError::ZeroScanPeriod);
                }
                scan_period_ms = Some(period);
            }
            other => {
                return Err(PlantError::Syntax {
                    line: line_no,
                    column: tokens[0].column,
                    message: format!("unknown declaration `{other}`"),
                })
            }
        }
    }

    let resolve = |name: &str, line: usize, column: usize| {
        by_name.get(name).copied().ok_or_else(|| PlantError::UndeclaredSignal {
            line,
            column,
            name: name.to_string(),
        })
    };
    fn resolve_expr(
        e: &RawExpr,
        line: usize,
        resolve: &dyn Fn(&str, usize, usize) -> Result<usize, PlantError>,
    ) -> Result<Expr, PlantError> {
        Ok(match e {
            RawExpr::Name(n, col) => Expr::Signal(resolve(n, line, *col)?),
            RawExpr::Not(a) => Expr::Not(Box::new(resolve_expr(a, line, resolve)?)),
            RawExpr::And(a, b) => Expr::And(
                Box::new(resolve_expr(a, line, resolve)?),
                Box::new(resolve_expr(b, line, resolve)?),
            ),
            RawExpr::Or(a, b) => Expr::Or(
                Box::new(resolve_expr(a, line, resolve)?),
                Box::new(resolve_expr(b, line, resolve)?),
            ),
        })
    }
    let resolve_effects = |effects: &[(String, usize, bool)],
                           line: usize,
                           allowed: SignalKind|
     -> Result<Vec<Assignment>, PlantError> {
        effects
            .iter()
            .map(|(name, column, value)| {
                let signal = resolve(name, line, *column)?;
                if signals[signal].kind != allowed {
                    let name = name.clone();
                    return Err(match allowed {
                        SignalKind::Sensor => PlantError::ProcessDrivesActuator { line, name },
                        SignalKind::Actuator => PlantError::ControlDrivesSensor { line, name },
                    });
                }
                Ok(Assignment { signal, value: *value })
            })
            .collect()
    };

    let mut process = Vec::new();
    let mut program = Vec::new();
    for rule in &raw_rules {
        match rule {
            RawRule::Process { line, guard, delay, jitter, effects } => process.push(ProcessRule {
                guard: resolve_expr(guard, *line, &resolve)?,
                delay_ms: *delay,
                jitter_ms: *jitter,
                effects: resolve_effects(effects, *line, SignalKind::Sensor)?,
            }),
            RawRule::Control { line, guard, effects } => program.push(ControlRule {
                guard: resolve_expr(guard, *line, &resolve)?,
                effects: resolve_effects(effects, *line, SignalKind::Actuator)?,
            }),
        }
    }

    Ok(PlantDescription {
        signals,
        process,
        program,
        scan_period_ms: scan_period_ms.unwrap_or(100),
    })
}

// ---------------------------------------------------------------------------
// Simulation

/// Executes one PLC scan followed by one scan period of process evolution.
///
/// Phase (a) samples the true sensor values through the fault mask, phase
/// (b) runs the control program against those samples and the output
/// image, phase (c) drives the actuators through the fault mask. Process
/// rules are then evaluated on the physical (true) values.
pub fn scan_step(
    plant: &PlantDescription,
    state: &mut PlantState,
    faults: &ActiveFaultSet,
    rng: &mut ChaCha8Rng,
) {
    let now = state.clock;
    let n = plant.width();
    debug_assert_eq!(state.true_values.len(), n);

    // (a) read inputs
    for (i, def) in plant.signals.iter().enumerate() {
        if def.kind == SignalKind::Sensor {
            state.observed_values[i] = faults.mask(i, state.true_values[i], now);
        }
    }

    // (b) execute the program on the input image plus the output image
    let mut image: Vec<bool> = (0..n)
        .map(|i| match plant.signals[i].kind {
            SignalKind::Sensor => state.observed_values[i],
            SignalKind::Actuator => state.commands[i],
        })
        .collect();
    for rule in &plant.program {
        if rule.guard.eval(&image) {
            for a in &rule.effects {
                image[a.signal] = a.value;
            }
        }
    }

    // (c) update outputs
    for (i, def) in plant.signals.iter().enumerate() {
        if def.kind == SignalKind::Actuator {
            state.commands[i] = image[i];
            let driven = faults.mask(i, image[i], now);
            state.true_values[i] = driven;
            state.observed_values[i] = driven;
        }
    }

    // physical process over (now, now + scan]
    let horizon = now + plant.scan_period_ms;
    let mut t = now;
    for _ in 0..MAX_FIRINGS_PER_SCAN {
        arm_process_rules(plant, state, t, rng);
        let next = state
            .pending
            .iter()
            .enumerate()
            .filter_map(|(r, p)| p.map(|ft| (ft, r)))
            .filter(|&(ft, _)| ft <= horizon)
            .min();
        let Some((fire_time, rule)) = next else { break };
        state.pending[rule] = None;
        for a in &plant.process[rule].effects {
            state.true_values[a.signal] = a.value;
        }
        t = fire_time;
    }
    state.clock = horizon;
}

fn arm_process_rules(plant: &PlantDescription, state: &mut PlantState, t: Millis, rng: &mut ChaCha8Rng) {
    for (r, rule) in plant.process.iter().enumerate() {
        let on = rule.guard.eval(&state.true_values);
        if on && !state.enabled[r] {
            let delay = if rule.jitter_ms == 0 {
                rule.delay_ms
            } else {
                rng.gen_range(rule.delay_ms - rule.jitter_ms..=rule.delay_ms + rule.jitter_ms)
            };
            state.pending[r] = Some(t + delay);
        } else if !on {
            state.pending[r] = None;
        }
        state.enabled[r] = on;
    }
}

/// Stepping driver owning the state and the jitter RNG of one run.
pub struct Simulator<'a> {
    plant: &'a PlantDescription,
    state: PlantState,
    faults: Vec<(usize, FaultSpec)>,
    active: ActiveFaultSet,
    rng: ChaCha8Rng,
}

impl<'a> Simulator<'a> {
    pub fn new(plant: &'a PlantDescription, faults: &[FaultSpec], seed: u64) -> Result<Self, PlantError> {
        let mut resolved = Vec::with_capacity(faults.len());
        for f in faults {
            let idx = plant
                .index_of(&f.target)
                .ok_or_else(|| FaultError::UnknownSignal(f.target.clone()))?;
            resolved.push((idx, f.clone()));
        }
        Ok(Simulator {
            plant,
            state: plant.initial_state(),
            faults: resolved,
            active: ActiveFaultSet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    /// Runs one scan and returns its time stamp and the observed snapshot.
    pub fn scan(&mut self) -> Result<(Millis, &[bool]), PlantError> {
        let now = self.state.clock;
        for (idx, spec) in &self.faults {
            if spec.inject_time_ms <= now && !self.active.contains(*idx) {
                self.active.activate(*idx, spec.clone())?;
            }
        }
        scan_step(self.plant, &mut self.state, &self.active, &mut self.rng);
        Ok((now, &self.state.observed_values))
    }
}

/// Simulates `horizon_ms` of plant time (one scan every scan period starting
/// at t = 0) and records every observed-value change.
pub fn run_scenario(
    plant: &PlantDescription,
    horizon_ms: Millis,
    faults: &[FaultSpec],
    seed: u64,
) -> Result<ChangeLog, PlantError> {
    if horizon_ms < plant.scan_period_ms {
        return Err(PlantError::HorizonTooShort {
            horizon: horizon_ms,
            scan: plant.scan_period_ms,
        });
    }
    let mut sim = Simulator::new(plant, faults, seed)?;
    let mut recorder = Recorder::new(plant.names(), plant.scan_period_ms);
    while sim.state.clock < horizon_ms {
        let (t, snapshot) = sim.scan()?;
        recorder
            .push(t, snapshot)
            .expect("simulator snapshots have constant width and increasing time");
    }
    Ok(recorder.finish())
}
