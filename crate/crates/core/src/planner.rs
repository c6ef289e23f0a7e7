//! Lattice-level recurrence planning: visit every target infinitely often
//! while avoiding obstacles, with obstacles inflated and targets shrunk by the
//! precision `epsilon`, then refine the waypoint sequence into an abstract
//! input signal by saturated reference tracking.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Aabb;
use crate::lattice::{LatticeError, LatticePoint, Quantizer};
use crate::numkernel::Vector;
use crate::systems::{simulate_abstract, AbstractRun, AbstractSystem, InputMap, InputSet, Signal, SystemError};

pub const DEFAULT_DWELL: f64 = 1.0;
pub const DEFAULT_GAIN: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("invalid workspace: {0}")]
    InvalidWorkspace(String),
    #[error("shrunk target {0} contains no admissible lattice point")]
    EmptyTarget(usize),
    #[error("target {0} is unreachable")]
    Disconnected(usize),
    #[error("start point {0:?} is not a vertex of the lattice graph")]
    StartNotInGraph(Vec<i64>),
    #[error("tracking failed on segment {segment}: error {error} exceeds {tolerance}")]
    TrackingFailure {
        segment: usize,
        error: f64,
        tolerance: f64,
    },
    #[error("tracking input saturated for more than half of segment {segment}")]
    InputMapViolation { segment: usize },
    #[error("plan violates {0}")]
    InvalidPlan(String),
}

/// Planning region: bounds, obstacles, targets and the precision margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub bounds: Aabb,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
    pub targets: Vec<Aabb>,
    pub epsilon: f64,
}

impl Workspace {
    pub fn validate(&self) -> Result<(), PlanError> {
        let n = self.bounds.dim();
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(PlanError::InvalidWorkspace(format!("epsilon {}", self.epsilon)));
        }
        if self.targets.is_empty() {
            return Err(PlanError::InvalidWorkspace("no targets".into()));
        }
        if self.obstacles.iter().chain(&self.targets).any(|b| b.dim() != n) {
            return Err(PlanError::InvalidWorkspace("box dimensions differ".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.inflate(self.epsilon).is_inside(&self.bounds) {
                return Err(PlanError::InvalidWorkspace(format!(
                    "inflated obstacle {i} leaves the bounds"
                )));
            }
        }
        for (j, t) in self.targets.iter().enumerate() {
            match t.shrink(self.epsilon) {
                Some(s) if s.is_inside(&self.bounds) => {}
                _ => return Err(PlanError::EmptyTarget(j)),
            }
        }
        Ok(())
    }

    pub fn inflated_obstacles(&self) -> Vec<Aabb> {
        self.obstacles.iter().map(|o| o.inflate(self.epsilon)).collect()
    }

    /// Shrunk targets; `None` entries are empty.
    pub fn shrunk_targets(&self) -> Vec<Option<Aabb>> {
        self.targets.iter().map(|t| t.shrink(self.epsilon)).collect()
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PlanError> {
        toml::from_str(s).map_err(|e| PlanError::InvalidWorkspace(e.to_string()))
    }
}

/// Lattice graph: vertices are admissible lattice points, edges join axis
/// neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGraph {
    pub quantizer: Quantizer,
    pub vertices: BTreeSet<LatticePoint>,
    /// Vertices whose coordinates lie in each shrunk target.
    pub targets: Vec<BTreeSet<LatticePoint>>,
}

impl LatticeGraph {
    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.vertices.contains(p)
    }

    pub fn neighbors<'a>(&'a self, p: &LatticePoint) -> impl Iterator<Item = LatticePoint> + 'a {
        self.quantizer
            .neighbors(p)
            .into_iter()
            .filter(move |q| self.vertices.contains(q))
    }

    pub fn degree(&self, p: &LatticePoint) -> usize {
        self.neighbors(p).count()
    }

    /// Breadth-first distances from `source`.
    pub fn distances(&self, source: &LatticePoint) -> BTreeMap<LatticePoint, usize> {
        let mut dist = BTreeMap::new();
        if !self.contains(source) {
            return dist;
        }
        dist.insert(source.clone(), 0);
        let mut queue = VecDeque::from([source.clone()]);
        while let Some(p) = queue.pop_front() {
            let d = dist[&p];
            for q in self.neighbors(&p) {
                if !dist.contains_key(&q) {
                    dist.insert(q.clone(), d + 1);
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    /// Shortest path from `source` to the nearest point of `goals`; among
    /// equally near goals and equally short paths the lexicographically
    /// smallest index vectors win.
    pub fn shortest_path(
        &self,
        source: &LatticePoint,
        goals: &BTreeSet<LatticePoint>,
    ) -> Option<Vec<LatticePoint>> {
        let dist = self.distances(source);
        let goal = goals
            .iter()
            .filter_map(|g| dist.get(g).map(|d| (*d, g)))
            .min()?
            .1
            .clone();
        let mut path = vec![goal];
        loop {
            let last = path.last().expect("nonempty");
            let d = dist[last];
            if d == 0 {
                break;
            }
            let prev = self
                .neighbors(last)
                .filter(|q| dist.get(q) == Some(&(d - 1)))
                .min()
                .expect("breadth-first predecessor exists");
            path.push(prev);
        }
        path.reverse();
        Some(path)
    }
}

fn axis_range(lo: f64, hi: f64, spacing: f64, hw: f64) -> (i64, i64) {
    let mut a = ((lo + hw) / spacing).ceil() as i64;
    let mut b = ((hi - hw) / spacing).floor() as i64;
    // Guard the rounding at either end against the exact cell test.
    while (a as f64) * spacing - hw < lo {
        a += 1;
    }
    while (b as f64) * spacing + hw > hi {
        b -= 1;
    }
    (a, b)
}

/// Builds the lattice graph of `ws` on the lattice of `quantizer`.
pub fn build_grid(ws: &Workspace, quantizer: &Quantizer) -> Result<LatticeGraph, PlanError> {
    ws.validate()?;
    let n = quantizer.dim();
    if n != ws.bounds.dim() {
        return Err(PlanError::InvalidWorkspace(format!(
            "workspace dimension {} vs lattice dimension {n}",
            ws.bounds.dim()
        )));
    }
    let safe = ws
        .bounds
        .shrink(ws.epsilon)
        .ok_or_else(|| PlanError::InvalidWorkspace("bounds vanish after shrinking".into()))?;
    let inflated = ws.inflated_obstacles();
    let spacing = quantizer.spacing();
    let hw = quantizer.half_width();
    let ranges: Vec<(i64, i64)> = (0..n)
        .map(|i| axis_range(safe.lo()[i], safe.hi()[i], spacing, hw))
        .collect();

    let mut vertices = BTreeSet::new();
    if ranges.iter().all(|(a, b)| a <= b) {
        let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        'outer: loop {
            let p = LatticePoint::new(idx.clone());
            let cell = quantizer.cell_of(&p);
            if cell.is_inside(&safe) && !inflated.iter().any(|o| o.intersects(&cell)) {
                vertices.insert(p);
            }
            for axis in 0..n {
                if idx[axis] < ranges[axis].1 {
                    idx[axis] += 1;
                    continue 'outer;
                }
                idx[axis] = ranges[axis].0;
            }
            break;
        }
    }

    let mut targets = Vec::with_capacity(ws.targets.len());
    for (j, t) in ws.shrunk_targets().into_iter().enumerate() {
        let t = t.ok_or(PlanError::EmptyTarget(j))?;
        let set: BTreeSet<LatticePoint> = vertices
            .iter()
            .filter(|p| t.contains(&quantizer.coordinates(p), 0.0))
            .cloned()
            .collect();
        if set.is_empty() {
            return Err(PlanError::EmptyTarget(j));
        }
        targets.push(set);
    }

    let graph = LatticeGraph {
        quantizer: *quantizer,
        vertices,
        targets,
    };
    let reach = graph.distances(graph.targets[0].first().expect("nonempty target"));
    for (j, set) in graph.targets.iter().enumerate() {
        if !set.iter().any(|p| reach.contains_key(p)) {
            return Err(PlanError::Disconnected(j));
        }
    }
    Ok(graph)
}

/// Waypoint plan: a prefix leading into a cycle that is repeated forever.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    /// From the start up to, not including, `cycle[0]`.
    pub prefix: Vec<LatticePoint>,
    /// Recurrent loop; the last waypoint neighbours `cycle[0]` unless the
    /// cycle is a single point.
    pub cycle: Vec<LatticePoint>,
    /// Target visiting order.
    pub order: Vec<usize>,
}

impl Plan {
    /// `prefix ++ cycle * laps ++ [cycle[0]]`.
    pub fn execution(&self, laps: usize) -> Vec<LatticePoint> {
        let mut seq = self.prefix.clone();
        for _ in 0..laps {
            seq.extend(self.cycle.iter().cloned());
        }
        seq.push(self.cycle[0].clone());
        seq
    }

    /// Number of edges in one pass around the cycle.
    pub fn cycle_length(&self) -> usize {
        if self.cycle.len() == 1 {
            0
        } else {
            self.cycle.len()
        }
    }

    /// CSV `index,phase,k_1..k_n,q_1..q_n` of the prefix followed by one
    /// lap of the cycle.
    pub fn write_csv<W: Write>(&self, quantizer: &Quantizer, mut out: W) -> io::Result<()> {
        let n = quantizer.dim();
        let mut header = vec!["index".to_string(), "phase".to_string()];
        header.extend((1..=n).map(|i| format!("k_{i}")));
        header.extend((1..=n).map(|i| format!("q_{i}")));
        writeln!(out, "{}", header.join(","))?;
        let rows = self
            .prefix
            .iter()
            .map(|p| ("prefix", p))
            .chain(self.cycle.iter().map(|p| ("cycle", p)));
        for (i, (phase, p)) in rows.enumerate() {
            write!(out, "{i},{phase}")?;
            for k in &p.indices {
                write!(out, ",{k}")?;
            }
            for q in quantizer.coordinates(p).iter() {
                write!(out, ",{q}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(k - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Shortest-path stitched recurrence plan from `start` through every target.
/// All visiting orders are enumerated; the shortest cycle wins, then the
/// shortest prefix, then the lexicographically smallest order.
pub fn plan_recurrence(graph: &LatticeGraph, start: &LatticePoint) -> Result<Plan, PlanError> {
    if !graph.contains(start) {
        return Err(PlanError::StartNotInGraph(start.indices.clone()));
    }
    if graph.targets.is_empty() {
        return Err(PlanError::InvalidWorkspace("no targets".into()));
    }
    let mut best: Option<((usize, usize, Vec<usize>), Plan)> = None;
    for order in permutations(graph.targets.len()) {
        let head = graph
            .shortest_path(start, &graph.targets[order[0]])
            .ok_or(PlanError::Disconnected(order[0]))?;
        let c0 = head.last().expect("nonempty path").clone();
        let prefix = head[..head.len() - 1].to_vec();

        let mut cycle = Vec::new();
        let mut at = c0.clone();
        for &j in order.iter().skip(1) {
            let leg = graph
                .shortest_path(&at, &graph.targets[j])
                .ok_or(PlanError::Disconnected(j))?;
            at = leg.last().expect("nonempty path").clone();
            cycle.extend_from_slice(&leg[..leg.len() - 1]);
        }
        let back = graph
            .shortest_path(&at, &BTreeSet::from([c0.clone()]))
            .ok_or(PlanError::Disconnected(order[0]))?;
        cycle.extend_from_slice(&back[..back.len() - 1]);
        if cycle.is_empty() {
            cycle.push(c0);
        }

        let plan = Plan {
            prefix,
            cycle,
            order: order.clone(),
        };
        let key = (plan.cycle_length(), plan.prefix.len(), order);
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, plan));
        }
    }
    Ok(best.expect("at least one order").1)
}

/// Independent geometric check of a plan against the workspace: neighbouring
/// consecutive waypoints, cells inside the shrunk bounds and clear of every
/// inflated obstacle, and a cycle waypoint inside every shrunk target.
pub fn validate_plan(plan: &Plan, ws: &Workspace, quantizer: &Quantizer) -> Result<(), PlanError> {
    if plan.cycle.is_empty() {
        return Err(PlanError::InvalidPlan("empty cycle".into()));
    }
    let safe = ws
        .bounds
        .shrink(ws.epsilon)
        .ok_or_else(|| PlanError::InvalidPlan("bounds vanish after shrinking".into()))?;
    let seq = plan.execution(2);
    for w in seq.windows(2) {
        let d = w[0].manhattan(&w[1]);
        if d > 1 || (d == 0 && plan.cycle.len() > 1) {
            return Err(PlanError::InvalidPlan(format!(
                "adjacency between {:?} and {:?}",
                w[0].indices, w[1].indices
            )));
        }
    }
    let inflated = ws.inflated_obstacles();
    for p in &seq {
        let cell = quantizer.cell_of(p);
        if !cell.is_inside(&safe) {
            return Err(PlanError::InvalidPlan(format!("bounds at {:?}", p.indices)));
        }
        if let Some(i) = inflated.iter().position(|o| o.intersects(&cell)) {
            return Err(PlanError::InvalidPlan(format!(
                "inflated obstacle {i} at {:?}",
                p.indices
            )));
        }
    }
    for (j, t) in ws.shrunk_targets().iter().enumerate() {
        let t = t.as_ref().ok_or(PlanError::EmptyTarget(j))?;
        if !plan.cycle.iter().any(|p| t.contains(&quantizer.coordinates(p), 0.0)) {
            return Err(PlanError::InvalidPlan(format!("no cycle waypoint in target {j}")));
        }
    }
    Ok(())
}

/// Tracking parameters for [`waypoints_to_input`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub dwell: f64,
    pub gain: f64,
    /// Passes around the cycle before returning to its first waypoint.
    pub laps: usize,
    pub dt: f64,
}

impl Default for Refinement {
    fn default() -> Self {
        Self {
            dwell: DEFAULT_DWELL,
            gain: DEFAULT_GAIN,
            laps: 1,
            dt: crate::numkernel::DEFAULT_DT,
        }
    }
}

/// Refined plan: waypoint references, the feedback abstract input that
/// tracks them, and the nominal abstract run it produces.
#[derive(Debug, Clone)]
pub struct RefinedPlan {
    pub references: Vec<Vector>,
    pub dwell: f64,
    pub gain: f64,
    pub horizon: f64,
    pub signal: Signal,
    pub run: AbstractRun,
}

impl RefinedPlan {
    /// Reference active at time `t`: segment `j` steers toward waypoint
    /// `j + 1`.
    pub fn reference_at(&self, t: f64) -> &Vector {
        &self.references[segment_target(t, self.dwell, self.references.len())]
    }

    /// CSV `segment,t_start,t_end,q_1..q_n` of the reference schedule.
    pub fn write_schedule_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.references.first().map_or(0, |r| r.len());
        let mut header = vec!["segment".to_string(), "t_start".into(), "t_end".into()];
        header.extend((1..=n).map(|i| format!("q_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (j, r) in self.references.iter().skip(1).enumerate() {
            write!(out, "{j},{},{}", j as f64 * self.dwell, (j + 1) as f64 * self.dwell)?;
            for q in r.iter() {
                write!(out, ",{q}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Largest distance from the abstract companion to the waypoint polyline.
    pub fn max_tube_distance(&self) -> f64 {
        self.run
            .continuous
            .states
            .iter()
            .map(|x| polyline_distance(&self.references, x))
            .fold(0.0, f64::max)
    }
}

fn segment_target(t: f64, dwell: f64, count: usize) -> usize {
    let j = (t / dwell + 1e-9).floor().max(0.0) as usize;
    (j + 1).min(count - 1)
}

fn polyline_distance(points: &[Vector], x: &Vector) -> f64 {
    if points.len() == 1 {
        return (x - &points[0]).norm();
    }
    points
        .windows(2)
        .map(|w| {
            let d = &w[1] - &w[0];
            let len2 = d.norm_squared();
            let s = if len2 > 0.0 {
                ((x - &w[0]).dot(&d) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (x - (&w[0] + d * s)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Refines the plan into the feedback abstract input
/// `v(t) = clamp_U'(-f_d(t, x_hat, 0) + k (p_next - x_hat))`, where `p_next`
/// is the waypoint the current dwell segment steers toward. The refined run
/// starts at the first waypoint and must end every segment within `eta / 2`
/// of its reference.
pub fn waypoints_to_input(
    plan: &Plan,
    abs: &AbstractSystem,
    u_prime: &InputSet,
    opts: &Refinement,
) -> Result<RefinedPlan, PlanError> {
    if !(opts.dwell > 0.0 && opts.gain > 0.0) {
        return Err(PlanError::InvalidPlan(format!(
            "dwell {} and gain {} must be positive",
            opts.dwell, opts.gain
        )));
    }
    let q = *abs.quantizer();
    let seq = plan.execution(opts.laps);
    let references: Arc<Vec<Vector>> = Arc::new(seq.iter().map(|p| q.coordinates(p)).collect());
    let segments = references.len() - 1;
    let horizon = segments as f64 * opts.dwell;
    let n = q.dim();

    let raw_input = {
        let refs = Arc::clone(&references);
        let abs = abs.clone();
        let (dwell, gain) = (opts.dwell, opts.gain);
        move |t: f64, x: &Vector| -> Vector {
            let target = &refs[segment_target(t, dwell, refs.len())];
            -abs.eval(t, x, &Vector::zeros(n)) + (target - x) * gain
        }
    };
    let clamp = {
        let u_prime = u_prime.clone();
        move |v: Vector| match &u_prime {
            InputSet::Box(b) => b.clamp(&v),
            InputSet::Unbounded(_) => v,
        }
    };
    let signal = {
        let raw = raw_input.clone();
        let clamp = clamp.clone();
        Signal::feedback(move |t, x| clamp(raw(t, x)))
    };

    let abs_run = abs.with_input_map(InputMap::Constant(u_prime.clone()));
    let run = simulate_abstract(&abs_run, &seq[0], &signal, (0.0, horizon), opts.dt)?;

    let tol = 0.5 * q.eta();
    let mut saturated = vec![0usize; segments.max(1)];
    let mut samples = vec![0usize; segments.max(1)];
    for (t, x) in run.continuous.times.iter().zip(&run.continuous.states) {
        let j = (segment_target(*t, opts.dwell, references.len()) - 1).min(segments.saturating_sub(1));
        let raw = raw_input(*t, x);
        samples[j] += 1;
        if clamp(raw.clone()) != raw {
            saturated[j] += 1;
        }
    }
    if let Some(j) = (0..segments).find(|&j| 2 * saturated[j] > samples[j]) {
        return Err(PlanError::InputMapViolation { segment: j });
    }
    for j in 0..segments {
        let t_end = (j + 1) as f64 * opts.dwell;
        let i = run
            .continuous
            .times
            .partition_point(|t| *t < t_end - 0.5 * opts.dt)
            .min(run.continuous.times.len() - 1);
        let error = (&run.continuous.states[i] - &references[j + 1]).norm();
        if error > tol {
            return Err(PlanError::TrackingFailure {
                segment: j,
                error,
                tolerance: tol,
            });
        }
    }

    Ok(RefinedPlan {
        references: (*references).clone(),
        dwell: opts.dwell,
        gain: opts.gain,
        horizon,
        signal,
        run,
    })
}
