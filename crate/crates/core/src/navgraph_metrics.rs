//! Navigation graphs, heading-based action labels and trajectory metrics
//! (task completion, shortest-path distance, edit-distance weighted success).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::action_predictor::TurnLabel;
use crate::error::{Error, Result};

pub const DEFAULT_FWD_THRESHOLD_DEG: f64 = 45.0;

/// Node ids may be written as JSON strings or integers.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Text(String),
    Int(i64),
}

impl From<RawId> for String {
    fn from(id: RawId) -> Self {
        match id {
            RawId::Text(s) => s,
            RawId::Int(i) => i.to_string(),
        }
    }
}

fn de_id<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    RawId::deserialize(d).map(String::from)
}

fn de_ids<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    Vec::<RawId>::deserialize(d).map(|v| v.into_iter().map(String::from).collect())
}

#[derive(Deserialize)]
struct NodeSpec {
    #[serde(deserialize_with = "de_id")]
    id: String,
    heading: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EdgeSpec {
    Pair(RawId, RawId),
    Weighted {
        #[serde(deserialize_with = "de_id")]
        from: String,
        #[serde(deserialize_with = "de_id")]
        to: String,
        length: Option<f64>,
    },
}

#[derive(Deserialize)]
struct GraphSpec {
    nodes: Vec<NodeSpec>,
    edges: Vec<EdgeSpec>,
}

/// Undirected graph of panorama nodes, each with a heading in degrees.
#[derive(Clone, Debug)]
pub struct NavGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    headings: Vec<f64>,
    adjacency: Vec<Vec<(usize, f64)>>,
    weighted: bool,
}

impl NavGraph {
    /// Headings are normalised into `[0, 360)`. Edge lengths must be given
    /// for all edges or for none; without them distances count hops.
    pub fn new(
        nodes: impl IntoIterator<Item = (String, f64)>,
        edges: impl IntoIterator<Item = (String, String, Option<f64>)>,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        let mut index = HashMap::new();
        let mut headings = Vec::new();
        for (id, heading) in nodes {
            if !heading.is_finite() {
                return Err(Error::invalid(format!("node {id}: heading {heading} is not finite")));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::invalid(format!("duplicate node id {id}")));
            }
            ids.push(id);
            headings.push(heading.rem_euclid(360.0));
        }
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ids.len()];
        let mut with_length = None;
        for (a, b, length) in edges {
            let (ia, ib) = match (index.get(&a), index.get(&b)) {
                (Some(&ia), Some(&ib)) => (ia, ib),
                _ => return Err(Error::invalid(format!("edge {a}-{b} references an unknown node"))),
            };
            if ia == ib {
                return Err(Error::invalid(format!("self-loop on node {a}")));
            }
            if *with_length.get_or_insert(length.is_some()) != length.is_some() {
                return Err(Error::invalid("edge lengths must be given for every edge or for none"));
            }
            let w = length.unwrap_or(1.0);
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::invalid(format!("edge {a}-{b}: length {w} must be positive")));
            }
            for (u, v) in [(ia, ib), (ib, ia)] {
                match adjacency[u].iter_mut().find(|(n, _)| *n == v) {
                    Some(existing) => existing.1 = existing.1.min(w),
                    None => adjacency[u].push((v, w)),
                }
            }
        }
        Ok(Self {
            ids,
            index,
            headings,
            adjacency,
            weighted: with_length == Some(true),
        })
    }

    /// Parses `{nodes: [{id, heading}], edges: [[a, b] | {from, to, length}]}`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: GraphSpec = serde_json::from_str(text)?;
        Self::new(
            spec.nodes.into_iter().map(|n| (n.id, n.heading)),
            spec.edges.into_iter().map(|e| match e {
                EdgeSpec::Pair(a, b) => (a.into(), b.into(), None),
                EdgeSpec::Weighted { from, to, length } => (from, to, length),
            }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.display().to_string(),
                line: j.line(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn heading(&self, id: &str) -> Option<f64> {
        self.index.get(id).map(|&i| self.headings[i])
    }

    pub fn is_adjacent(&self, a: &str, b: &str) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&ia), Some(&ib)) => self.adjacency[ia].iter().any(|(n, _)| *n == ib),
            _ => false,
        }
    }

    fn node(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown node {id}")))
    }

    /// Non-empty, every node known, consecutive nodes adjacent.
    pub fn validate_trajectory(&self, trajectory: &[String]) -> Result<()> {
        if trajectory.is_empty() {
            return Err(Error::InvalidTrajectory("empty trajectory".into()));
        }
        if let Some(unknown) = trajectory.iter().find(|n| !self.contains(n)) {
            return Err(Error::InvalidTrajectory(format!("unknown node {unknown}")));
        }
        for (i, w) in trajectory.windows(2).enumerate() {
            if !self.is_adjacent(&w[0], &w[1]) {
                return Err(Error::InvalidTrajectory(format!(
                    "steps {i} and {}: {} and {} are not adjacent",
                    i + 1,
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(())
    }

    /// Shortest distance between two nodes: hops, or summed edge lengths
    /// when the graph is weighted.
    pub fn distance(&self, from: &str, to: &str) -> Result<f64> {
        let (s, t) = (self.node(from)?, self.node(to)?);
        let found = if self.weighted {
            self.dijkstra(s, t)
        } else {
            self.bfs(s, t).map(|h| h as f64)
        };
        found.ok_or_else(|| Error::Unreachable {
            from: from.to_string(),
            to: to.to_string(),
        })
    }

    fn bfs(&self, s: usize, t: usize) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            if u == t {
                return Some(dist[u]);
            }
            for &(v, _) in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        None
    }

    fn dijkstra(&self, s: usize, t: usize) -> Option<f64> {
        #[derive(PartialEq)]
        struct Entry(f64, usize);
        impl Eq for Entry {}
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
            }
        }
        let mut dist = vec![f64::INFINITY; self.len()];
        dist[s] = 0.0;
        let mut heap = BinaryHeap::from([Entry(0.0, s)]);
        while let Some(Entry(d, u)) = heap.pop() {
            if u == t {
                return Some(d);
            }
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adjacency[u] {
                if d + w < dist[v] {
                    dist[v] = d + w;
                    heap.push(Entry(d + w, v));
                }
            }
        }
        None
    }
}

/// Signed heading change from `from` to `to`, wrapped into `(-180, 180]`.
/// Positive is clockwise.
pub fn heading_delta(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// One action per step of `trajectory`, ending with STOP.
pub fn derive_actions(graph: &NavGraph, trajectory: &[String], fwd_threshold_deg: f64) -> Result<Vec<TurnLabel>> {
    graph.validate_trajectory(trajectory)?;
    let mut actions: Vec<TurnLabel> = trajectory
        .windows(2)
        .map(|w| {
            let delta = heading_delta(graph.headings[graph.index[&w[0]]], graph.headings[graph.index[&w[1]]]);
            if delta.abs() < fwd_threshold_deg {
                TurnLabel::Forward
            } else if delta > 0.0 {
                TurnLabel::Right
            } else {
                TurnLabel::Left
            }
        })
        .collect();
    actions.push(TurnLabel::Stop);
    Ok(actions)
}

/// 1 when the trajectory ends at the goal or at one of its neighbours.
pub fn task_completion(graph: &NavGraph, predicted: &[String], goal: &str) -> Result<u8> {
    let last = predicted
        .last()
        .ok_or_else(|| Error::invalid("empty predicted trajectory"))?;
    graph.node(goal)?;
    graph.node(last)?;
    Ok(u8::from(last == goal || graph.is_adjacent(last, goal)))
}

pub fn spd(graph: &NavGraph, predicted: &[String], goal: &str) -> Result<f64> {
    let last = predicted
        .last()
        .ok_or_else(|| Error::invalid("empty predicted trajectory"))?;
    graph.distance(last, goal)
}

/// Edit distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `TC * (1 - lev(predicted, gold) / max(|predicted|, |gold|))`.
pub fn sed(graph: &NavGraph, predicted: &[String], gold: &[String], goal: &str) -> Result<f64> {
    graph.validate_trajectory(predicted)?;
    graph.validate_trajectory(gold)?;
    let tc = task_completion(graph, predicted, goal)?;
    if tc == 0 {
        return Ok(0.0);
    }
    let lev = levenshtein(predicted, gold) as f64;
    let longest = predicted.len().max(gold.len()) as f64;
    Ok((1.0 - lev / longest).clamp(0.0, 1.0))
}

/// One line of an evaluation batch.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct EvalRecord {
    #[serde(deserialize_with = "de_id")]
    pub sample_id: String,
    #[serde(deserialize_with = "de_ids")]
    pub predicted: Vec<String>,
    #[serde(deserialize_with = "de_ids")]
    pub gold: Vec<String>,
    #[serde(deserialize_with = "de_id")]
    pub goal: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sample_id: String,
    pub tc: u8,
    pub spd: f64,
    pub sed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub sample_id: String,
    pub reason: String,
}

/// Means over the successfully evaluated records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub evaluated: usize,
    pub failed: usize,
    pub tc: f64,
    pub spd: f64,
    pub sed: f64,
    pub failures: Vec<EvalFailure>,
}

pub fn evaluate(graph: &NavGraph, record: &EvalRecord) -> Result<EvalResult> {
    Ok(EvalResult {
        sample_id: record.sample_id.clone(),
        tc: task_completion(graph, &record.predicted, &record.goal)?,
        spd: spd(graph, &record.predicted, &record.goal)?,
        sed: sed(graph, &record.predicted, &record.gold, &record.goal)?,
    })
}

pub fn evaluate_batch(graph: &NavGraph, records: &[EvalRecord]) -> (Vec<EvalResult>, EvalSummary) {
    let mut results = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for r in records {
        match evaluate(graph, r) {
            Ok(res) => results.push(res),
            Err(e) => {
                log::warn!("sample {} not evaluated: {e}", r.sample_id);
                failures.push(EvalFailure {
                    sample_id: r.sample_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let n = results.len();
    let mean = |f: fn(&EvalResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            results.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let summary = EvalSummary {
        evaluated: n,
        failed: failures.len(),
        tc: mean(|r| r.tc as f64),
        spd: mean(|r| r.spd),
        sed: mean(|r| r.sed),
        failures,
    };
    (results, summary)
}
