//! Physical feeder model: buses, line segments, switch states.
//!
//! The feeder file format is line oriented:
//!
//! ```text
//! bus <id> <phases> [substation]
//! line <from> <to> <phases> <length>
//! switch <from> <to> <phases> <closed|open>
//! xfmr <from> <to> <phases>
//! reg <from> <to> <phases>
//! ```
//!
//! `#` starts a comment, phases are a subset string of `ABC`, lengths are
//! per-unit. Regulators, transformers and switches have length zero.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("unknown switch {from}-{to}")]
    UnknownSwitch { from: String, to: String },
    #[error("segment {from}-{to} is not a switch")]
    NotASwitch { from: String, to: String },
}

/// One of the three phases of a distribution circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    A,
    B,
    C,
}

pub const ALL_PHASES: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

impl Phase {
    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }
}

/// Non-empty subset of {A, B, C}, stored as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub fn empty() -> Self {
        PhaseSet(0)
    }

    pub fn all() -> Self {
        PhaseSet(0b111)
    }

    pub fn from_str_strict(s: &str) -> Result<Self, String> {
        let mut mask = 0u8;
        for c in s.chars() {
            let bit = match c {
                'A' => 1,
                'B' => 2,
                'C' => 4,
                _ => return Err(format!("invalid phase character '{c}' in \"{s}\"")),
            };
            if mask & bit != 0 {
                return Err(format!("duplicate phase '{c}' in \"{s}\""));
            }
            mask |= bit;
        }
        if mask == 0 {
            return Err("empty phase set".to_string());
        }
        Ok(PhaseSet(mask))
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn intersection(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 & other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        ALL_PHASES.into_iter().filter(move |p| self.contains(*p))
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            let c = match p {
                Phase::A => 'A',
                Phase::B => 'B',
                Phase::C => 'C',
            };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
    pub is_substation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Line,
    Switch,
    Regulator,
    Transformer,
}

impl SegmentKind {
    pub fn keyword(self) -> &'static str {
        match self {
            SegmentKind::Line => "line",
            SegmentKind::Switch => "switch",
            SegmentKind::Regulator => "reg",
            SegmentKind::Transformer => "xfmr",
        }
    }
}

/// A physical connection between two buses. `from`/`to` index into
/// `FeederTopology::buses`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSegment {
    pub from: usize,
    pub to: usize,
    pub phases: PhaseSet,
    pub length: f64,
    pub kind: SegmentKind,
}

/// Open/closed state of one switch segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchState {
    pub segment: usize,
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchAction {
    Open,
    Close,
}

/// A switch operation addressed by the endpoints of the switch segment.
#[derive(Debug, Clone)]
pub struct SwitchOp {
    pub from: String,
    pub to: String,
    pub action: SwitchAction,
}

impl SwitchOp {
    pub fn open(from: &str, to: &str) -> Self {
        SwitchOp {
            from: from.to_string(),
            to: to.to_string(),
            action: SwitchAction::Open,
        }
    }

    pub fn close(from: &str, to: &str) -> Self {
        SwitchOp {
            from: from.to_string(),
            to: to.to_string(),
            action: SwitchAction::Close,
        }
    }
}

/// Sort key giving bus ids a natural order: numeric ids ascend numerically,
/// ids with a non-numeric tail ("9r") sort right after their numeric prefix.
pub fn bus_id_key(id: &str) -> (u64, String) {
    let digits: String = id.chars().take_while(|c| c.is_ascii_digit()).collect();
    match digits.parse::<u64>() {
        Ok(n) => (n, id.to_string()),
        Err(_) => (u64::MAX, id.to_string()),
    }
}

/// Immutable feeder topology. Buses are held in natural id order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederTopology {
    pub buses: Vec<Bus>,
    pub segments: Vec<LineSegment>,
    pub switch_states: Vec<SwitchState>,
    index: HashMap<String, usize>,
}

impl FeederTopology {
    fn build(
        mut buses: Vec<Bus>,
        raw_segments: Vec<(String, String, PhaseSet, f64, SegmentKind, bool)>,
    ) -> Result<Self, FeederError> {
        buses.sort_by_key(|b| bus_id_key(&b.id));
        let index: HashMap<String, usize> = buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), i))
            .collect();

        let substations = buses.iter().filter(|b| b.is_substation).count();
        if substations != 1 {
            return Err(FeederError::Semantic(format!(
                "expected exactly one substation bus, found {substations}"
            )));
        }

        let mut segments = Vec::with_capacity(raw_segments.len());
        let mut switch_states = Vec::new();
        for (from_id, to_id, phases, length, kind, closed) in raw_segments {
            let from = *index.get(&from_id).ok_or_else(|| {
                FeederError::Semantic(format!("segment references undeclared bus \"{from_id}\""))
            })?;
            let to = *index.get(&to_id).ok_or_else(|| {
                FeederError::Semantic(format!("segment references undeclared bus \"{to_id}\""))
            })?;
            if from == to {
                return Err(FeederError::Semantic(format!(
                    "segment {from_id}-{to_id} connects a bus to itself"
                )));
            }
            let allowed = buses[from].phases.intersection(buses[to].phases);
            if !phases.is_subset_of(allowed) {
                return Err(FeederError::Semantic(format!(
                    "segment {from_id}-{to_id} phases {phases} exceed endpoint phases {allowed}"
                )));
            }
            if length < 0.0 {
                return Err(FeederError::Semantic(format!(
                    "segment {from_id}-{to_id} has negative length"
                )));
            }
            if kind == SegmentKind::Switch {
                switch_states.push(SwitchState {
                    segment: segments.len(),
                    closed,
                });
            }
            segments.push(LineSegment {
                from,
                to,
                phases,
                length,
                kind,
            });
        }

        Ok(FeederTopology {
            buses,
            segments,
            switch_states,
            index,
        })
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn bus_id(&self, index: usize) -> &str {
        &self.buses[index].id
    }

    pub fn substation_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.is_substation)
            .expect("topology always has a substation")
    }

    /// Whether a segment currently conducts: non-switch segments always do,
    /// switches follow their state.
    pub fn is_segment_closed(&self, segment: usize) -> bool {
        match self.segments[segment].kind {
            SegmentKind::Switch => self
                .switch_states
                .iter()
                .find(|s| s.segment == segment)
                .map(|s| s.closed)
                .unwrap_or(false),
            _ => true,
        }
    }

    /// Adjacency over closed segments, neighbor lists in natural bus order.
    pub fn closed_graph(&self) -> ClosedGraph {
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.buses.len()];
        for (i, seg) in self.segments.iter().enumerate() {
            if self.is_segment_closed(i) {
                adj[seg.from].push((seg.to, i));
                adj[seg.to].push((seg.from, i));
            }
        }
        for list in &mut adj {
            list.sort_by_key(|(b, _)| bus_id_key(&self.buses[*b].id));
        }
        ClosedGraph { adj }
    }

    /// Returns a new topology with the given switch operations applied.
    pub fn apply_switch_ops(&self, ops: &[SwitchOp]) -> Result<FeederTopology, FeederError> {
        let mut out = self.clone();
        for op in ops {
            let from = self.bus_index(&op.from).ok_or_else(|| FeederError::UnknownSwitch {
                from: op.from.clone(),
                to: op.to.clone(),
            })?;
            let to = self.bus_index(&op.to).ok_or_else(|| FeederError::UnknownSwitch {
                from: op.from.clone(),
                to: op.to.clone(),
            })?;
            let seg = self
                .segments
                .iter()
                .position(|s| {
                    (s.from == from && s.to == to) || (s.from == to && s.to == from)
                })
                .ok_or_else(|| FeederError::UnknownSwitch {
                    from: op.from.clone(),
                    to: op.to.clone(),
                })?;
            if self.segments[seg].kind != SegmentKind::Switch {
                return Err(FeederError::NotASwitch {
                    from: op.from.clone(),
                    to: op.to.clone(),
                });
            }
            let state = out
                .switch_states
                .iter_mut()
                .find(|s| s.segment == seg)
                .expect("switch segment has a state");
            state.closed = op.action == SwitchAction::Close;
        }
        Ok(out)
    }

    /// Shortest closed-path length between two buses, `None` if unreachable.
    pub fn electrical_distance(&self, a: &str, b: &str) -> Result<Option<f64>, FeederError> {
        let ai = self
            .bus_index(a)
            .ok_or_else(|| FeederError::Semantic(format!("unknown bus \"{a}\"")))?;
        let bi = self
            .bus_index(b)
            .ok_or_else(|| FeederError::Semantic(format!("unknown bus \"{b}\"")))?;
        let dist = self.closed_graph().dijkstra(ai, &self.segments);
        Ok(dist[bi])
    }

    /// Connectivity, radiality and phase diagnostics.
    pub fn validate(&self) -> Diagnostics {
        let mut diags = Diagnostics::default();
        let graph = self.closed_graph();
        let sub = self.substation_index();
        let reach = graph.reachable_from(sub);

        let orphans: Vec<&str> = (0..self.buses.len())
            .filter(|&i| !reach[i])
            .map(|i| self.bus_id(i))
            .collect();
        diags.orphan_count = orphans.len();
        for id in &orphans {
            diags.push(
                Severity::Error,
                format!("bus {id} is unreachable from the substation over closed segments"),
            );
        }

        let closed_edges = (0..self.segments.len())
            .filter(|&i| self.is_segment_closed(i))
            .count();
        let components = graph.component_count();
        // edges = nodes - components holds exactly for forests
        let is_forest = closed_edges == self.buses.len() - components;
        diags.radial = is_forest;
        if !is_forest {
            let loops = closed_edges + components - self.buses.len();
            diags.push(
                Severity::Warning,
                format!("closed segments contain {loops} loop(s); topology is not radial"),
            );
        }

        for (i, seg) in self.segments.iter().enumerate() {
            let allowed = self.buses[seg.from]
                .phases
                .intersection(self.buses[seg.to].phases);
            if !seg.phases.is_subset_of(allowed) {
                diags.push(
                    Severity::Error,
                    format!(
                        "segment {} {}-{} phases {} exceed endpoint phases {}",
                        i,
                        self.bus_id(seg.from),
                        self.bus_id(seg.to),
                        seg.phases,
                        allowed
                    ),
                );
            }
        }
        diags
    }

    /// Canonical text form; `parse_feeder(serialize(t)) == t`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for bus in &self.buses {
            out.push_str("bus ");
            out.push_str(&bus.id);
            out.push(' ');
            out.push_str(&bus.phases.to_string());
            if bus.is_substation {
                out.push_str(" substation");
            }
            out.push('\n');
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let from = self.bus_id(seg.from);
            let to = self.bus_id(seg.to);
            match seg.kind {
                SegmentKind::Line => {
                    out.push_str(&format!("line {from} {to} {} {}\n", seg.phases, seg.length));
                }
                SegmentKind::Switch => {
                    let state = if self.is_segment_closed(i) { "closed" } else { "open" };
                    out.push_str(&format!("switch {from} {to} {} {state}\n", seg.phases));
                }
                SegmentKind::Regulator => {
                    out.push_str(&format!("reg {from} {to} {}\n", seg.phases));
                }
                SegmentKind::Transformer => {
                    out.push_str(&format!("xfmr {from} {to} {}\n", seg.phases));
                }
            }
        }
        out
    }
}

/// Adjacency over the currently closed segments of a topology.
pub struct ClosedGraph {
    /// `adj[bus] = [(neighbor bus, segment index), ...]` in natural bus order.
    pub adj: Vec<Vec<(usize, usize)>>,
}

impl ClosedGraph {
    pub fn reachable_from(&self, src: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        let mut stack = vec![src];
        seen[src] = true;
        while let Some(v) = stack.pop() {
            for &(w, _) in &self.adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    }

    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.adj.len()];
        let mut count = 0;
        for start in 0..self.adj.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                for &(w, _) in &self.adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }

    /// Buses in breadth-first visit order from `src`.
    pub fn bfs_order(&self, src: usize) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.adj.len());
        let mut seen = vec![false; self.adj.len()];
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(src);
        seen[src] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &(w, _) in &self.adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        order
    }

    /// Hop counts from `src`, `None` where unreachable.
    pub fn hops_from(&self, src: usize) -> Vec<Option<u32>> {
        let mut hops = vec![None; self.adj.len()];
        let mut queue = std::collections::VecDeque::new();
        hops[src] = Some(0);
        queue.push_back(src);
        while let Some(v) = queue.pop_front() {
            let h = hops[v].unwrap();
            for &(w, _) in &self.adj[v] {
                if hops[w].is_none() {
                    hops[w] = Some(h + 1);
                    queue.push_back(w);
                }
            }
        }
        hops
    }

    /// Single-source shortest path lengths using segment lengths as weights.
    pub fn dijkstra(&self, src: usize, segments: &[LineSegment]) -> Vec<Option<f64>> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        #[derive(PartialEq)]
        struct Cost(f64);
        impl Eq for Cost {}
        impl PartialOrd for Cost {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Cost {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                self.0.partial_cmp(&other.0).expect("costs are finite")
            }
        }

        let mut dist: Vec<Option<f64>> = vec![None; self.adj.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = Some(0.0);
        heap.push(Reverse((Cost(0.0), src)));
        while let Some(Reverse((Cost(d), v))) = heap.pop() {
            if dist[v].map_or(true, |best| d > best) {
                continue;
            }
            for &(w, seg) in &self.adj[v] {
                let nd = d + segments[seg].length;
                if dist[w].map_or(true, |best| nd < best) {
                    dist[w] = Some(nd);
                    heap.push(Reverse((Cost(nd), w)));
                }
            }
        }
        dist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Diagnostics {
    pub items: Vec<Diagnostic>,
    pub orphan_count: usize,
    pub radial: bool,
}

impl Diagnostics {
    fn push(&mut self, severity: Severity, message: String) {
        self.items.push(Diagnostic { severity, message });
    }

    pub fn has_errors(&self) -> bool {
        self.items.iter().any(|d| d.severity == Severity::Error)
    }
}

/// Parses the feeder file format described in the module docs.
pub fn parse_feeder(text: &str) -> Result<FeederTopology, FeederError> {
    let mut buses = Vec::new();
    let mut segments = Vec::new();
    let mut seen_ids: HashMap<String, usize> = HashMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let parse_phases = |s: &str| {
            PhaseSet::from_str_strict(s).map_err(|msg| FeederError::Parse { line, msg })
        };
        match tokens[0] {
            "bus" => {
                if tokens.len() < 3 || tokens.len() > 4 {
                    return Err(FeederError::Parse {
                        line,
                        msg: "expected: bus <id> <phases> [substation]".to_string(),
                    });
                }
                let id = tokens[1].to_string();
                if seen_ids.contains_key(&id) {
                    return Err(FeederError::Parse {
                        line,
                        msg: format!("bus \"{id}\" declared twice"),
                    });
                }
                let phases = parse_phases(tokens[2])?;
                let is_substation = match tokens.get(3) {
                    None => false,
                    Some(&"substation") => true,
                    Some(other) => {
                        return Err(FeederError::Parse {
                            line,
                            msg: format!("unexpected token \"{other}\""),
                        })
                    }
                };
                seen_ids.insert(id.clone(), line);
                buses.push(Bus {
                    id,
                    phases,
                    is_substation,
                });
            }
            "line" => {
                if tokens.len() != 5 {
                    return Err(FeederError::Parse {
                        line,
                        msg: "expected: line <from> <to> <phases> <length>".to_string(),
                    });
                }
                let length: f64 = tokens[4].parse().map_err(|_| FeederError::Parse {
                    line,
                    msg: format!("invalid length \"{}\"", tokens[4]),
                })?;
                segments.push((
                    tokens[1].to_string(),
                    tokens[2].to_string(),
                    parse_phases(tokens[3])?,
                    length,
                    SegmentKind::Line,
                    true,
                ));
            }
            "switch" => {
                if tokens.len() != 5 {
                    return Err(FeederError::Parse {
                        line,
                        msg: "expected: switch <from> <to> <phases> <closed|open>".to_string(),
                    });
                }
                let closed = match tokens[4] {
                    "closed" => true,
                    "open" => false,
                    other => {
                        return Err(FeederError::Parse {
                            line,
                            msg: format!("invalid switch state \"{other}\""),
                        })
                    }
                };
                segments.push((
                    tokens[1].to_string(),
                    tokens[2].to_string(),
                    parse_phases(tokens[3])?,
                    0.0,
                    SegmentKind::Switch,
                    closed,
                ));
            }
            "reg" | "xfmr" => {
                if tokens.len() != 4 {
                    return Err(FeederError::Parse {
                        line,
                        msg: format!("expected: {} <from> <to> <phases>", tokens[0]),
                    });
                }
                let kind = if tokens[0] == "reg" {
                    SegmentKind::Regulator
                } else {
                    SegmentKind::Transformer
                };
                segments.push((
                    tokens[1].to_string(),
                    tokens[2].to_string(),
                    parse_phases(tokens[3])?,
                    0.0,
                    kind,
                    true,
                ));
            }
            other => {
                return Err(FeederError::Parse {
                    line,
                    msg: format!("unknown record type \"{other}\""),
                });
            }
        }
    }

    FeederTopology::build(buses, segments)
}

/// Micro-PMU phase coverage class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseClass {
    ThreePhase,
    TwoPhase,
    SinglePhase,
}

impl PhaseClass {
    pub fn phase_count(self) -> usize {
        match self {
            PhaseClass::ThreePhase => 3,
            PhaseClass::TwoPhase => 2,
            PhaseClass::SinglePhase => 1,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            PhaseClass::ThreePhase => "three",
            PhaseClass::TwoPhase => "two",
            PhaseClass::SinglePhase => "single",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlacementEntry {
    pub bus: String,
    pub class: PhaseClass,
}

/// Sensor placement: which buses carry micro-PMUs and their phase class.
#[derive(Debug, Clone)]
pub struct SensorPlacement {
    pub entries: Vec<PlacementEntry>,
}

impl SensorPlacement {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks entry buses exist, are distinct, and classes match bus phasing.
    pub fn validate(&self, topology: &FeederTopology) -> Result<(), FeederError> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.bus.clone()) {
                return Err(FeederError::Semantic(format!(
                    "duplicate placement bus \"{}\"",
                    entry.bus
                )));
            }
            let idx = self.resolve_bus(topology, entry)?;
            let have = topology.buses[idx].phases.len();
            let want = entry.class.phase_count();
            if have != want {
                return Err(FeederError::Semantic(format!(
                    "placement at bus \"{}\" declares {} phase(s) but the bus has {}",
                    entry.bus, want, have
                )));
            }
        }
        Ok(())
    }

    fn resolve_bus(
        &self,
        topology: &FeederTopology,
        entry: &PlacementEntry,
    ) -> Result<usize, FeederError> {
        topology.bus_index(&entry.bus).ok_or_else(|| {
            FeederError::Semantic(format!("placement references unknown bus \"{}\"", entry.bus))
        })
    }
}

/// Parses a placement file: `pmu <bus> <three|two|single>` records.
pub fn parse_placement(text: &str) -> Result<SensorPlacement, FeederError> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 3 || tokens[0] != "pmu" {
            return Err(FeederError::Parse {
                line,
                msg: "expected: pmu <bus> <three|two|single>".to_string(),
            });
        }
        let class = match tokens[2] {
            "three" => PhaseClass::ThreePhase,
            "two" => PhaseClass::TwoPhase,
            "single" => PhaseClass::SinglePhase,
            other => {
                return Err(FeederError::Parse {
                    line,
                    msg: format!("invalid phase class \"{other}\""),
                })
            }
        };
        entries.push(PlacementEntry {
            bus: tokens[1].to_string(),
            class,
        });
    }
    Ok(SensorPlacement { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "\
bus 150 ABC substation
bus 1 ABC
line 150 1 ABC 3.0
";

    #[test]
    fn parses_minimal_two_bus_feeder() {
        let t = parse_feeder(TWO_BUS).unwrap();
        assert_eq!(t.buses.len(), 2);
        assert_eq!(t.segments.len(), 1);
        assert_eq!(t.bus_id(t.substation_index()), "150");
    }

    #[test]
    fn rejects_dangling_bus_reference() {
        let text = "\
bus 150 ABC substation
line 150 999 ABC 1.0
";
        let err = parse_feeder(text).unwrap_err();
        assert!(matches!(err, FeederError::Semantic(_)), "{err}");
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn rejects_phase_mismatch() {
        let text = "\
bus 150 ABC substation
bus 1 A
line 150 1 AB 1.0
";
        assert!(parse_feeder(text).is_err());
    }

    #[test]
    fn reports_parse_error_line() {
        let text = "bus 150 ABC substation\nbogus record\n";
        match parse_feeder(text) {
            Err(FeederError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn distance_reflexive_and_single_edge() {
        let t = parse_feeder(TWO_BUS).unwrap();
        assert_eq!(t.electrical_distance("150", "150").unwrap(), Some(0.0));
        assert_eq!(t.electrical_distance("150", "1").unwrap(), Some(3.0));
        assert_eq!(t.electrical_distance("1", "150").unwrap(), Some(3.0));
    }

    #[test]
    fn distance_unreachable_over_open_switch() {
        let text = "\
bus 150 ABC substation
bus 1 ABC
switch 150 1 ABC open
";
        let t = parse_feeder(text).unwrap();
        assert_eq!(t.electrical_distance("150", "1").unwrap(), None);
    }

    #[test]
    fn switch_ops_identity_and_inverse() {
        let text = "\
bus 150 ABC substation
bus 1 ABC
switch 150 1 ABC closed
";
        let t = parse_feeder(text).unwrap();
        let same = t.apply_switch_ops(&[]).unwrap();
        assert_eq!(t, same);

        let opened = t.apply_switch_ops(&[SwitchOp::open("150", "1")]).unwrap();
        assert!(!opened.is_segment_closed(0));
        let opened_twice = opened.apply_switch_ops(&[SwitchOp::open("150", "1")]).unwrap();
        assert_eq!(opened, opened_twice);
        let back = opened.apply_switch_ops(&[SwitchOp::close("150", "1")]).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn switch_ops_reject_non_switch_segment() {
        let t = parse_feeder(TWO_BUS).unwrap();
        let err = t.apply_switch_ops(&[SwitchOp::open("150", "1")]).unwrap_err();
        assert!(matches!(err, FeederError::NotASwitch { .. }));
        let err = t.apply_switch_ops(&[SwitchOp::open("150", "42")]).unwrap_err();
        assert!(matches!(err, FeederError::UnknownSwitch { .. }));
    }

    #[test]
    fn single_bus_topology_is_valid() {
        let t = parse_feeder("bus 150 ABC substation\n").unwrap();
        let d = t.validate();
        assert!(!d.has_errors());
        assert_eq!(d.orphan_count, 0);
        assert!(d.radial);
    }

    #[test]
    fn serialize_round_trips() {
        let text = "\
bus 150 ABC substation
bus 1 ABC
bus 2 AB
line 150 1 ABC 0.4
switch 1 2 AB open
reg 150 1 A
";
        let t = parse_feeder(text).unwrap();
        let again = parse_feeder(&t.serialize()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn placement_validation() {
        let text = "\
bus 150 ABC substation
bus 1 AB
line 150 1 AB 1.0
";
        let t = parse_feeder(text).unwrap();
        let p = parse_placement("pmu 150 three\npmu 1 two\n").unwrap();
        p.validate(&t).unwrap();

        let bad = parse_placement("pmu 1 three\n").unwrap();
        assert!(bad.validate(&t).is_err());
        let dup = parse_placement("pmu 150 three\npmu 150 three\n").unwrap();
        assert!(dup.validate(&t).is_err());
        let missing = parse_placement("pmu 999 three\n").unwrap();
        assert!(missing.validate(&t).is_err());
    }

    #[test]
    fn triangle_inequality_on_small_mesh() {
        let text = "\
bus 150 ABC substation
bus 1 ABC
bus 2 ABC
line 150 1 ABC 1.0
line 1 2 ABC 2.0
line 150 2 ABC 2.5
";
        let t = parse_feeder(text).unwrap();
        let ids = ["150", "1", "2"];
        for a in ids {
            for b in ids {
                let dab = t.electrical_distance(a, b).unwrap().unwrap();
                let dba = t.electrical_distance(b, a).unwrap().unwrap();
                assert_eq!(dab, dba);
                for c in ids {
                    let dac = t.electrical_distance(a, c).unwrap().unwrap();
                    let dcb = t.electrical_distance(c, b).unwrap().unwrap();
                    assert!(dab <= dac + dcb + 1e-12);
                }
            }
        }
    }
}
