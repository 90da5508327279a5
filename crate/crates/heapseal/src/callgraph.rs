//! Program call graphs and the four instrumentation strategies.
//!
//! A [`CallGraph`] is a set of functions connected by call-site edges. The
//! strategies select which call sites receive context-encoding
//! instrumentation: `Fcs` takes every site, `Tcs` keeps only sites that can
//! reach a target function, `Slim` drops sites in non-branching nodes, and
//! `Incremental` keeps only sites in nodes that branch toward the *same*
//! target (per-target backward BFS).

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// A single call site: `caller` invokes `callee`, with `site_id`
/// distinguishing multiple sites between the same pair of functions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CallSite {
    pub caller: String,
    pub callee: String,
    pub site_id: u32,
}

impl CallSite {
    pub fn new(caller: impl Into<String>, callee: impl Into<String>, site_id: u32) -> Self {
        Self {
            caller: caller.into(),
            callee: callee.into(),
            site_id,
        }
    }
}

impl fmt::Display for CallSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.caller, self.callee, self.site_id)
    }
}

/// A program call graph with designated roots and target functions.
#[derive(Debug, Clone, Default)]
pub struct CallGraph {
    pub nodes: BTreeSet<String>,
    pub edges: Vec<CallSite>,
    pub roots: BTreeSet<String>,
    pub targets: BTreeSet<String>,
}

/// Instrumentation strategy selecting which call sites carry encoding updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Fcs,
    Tcs,
    Slim,
    Incremental,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Fcs,
        Strategy::Tcs,
        Strategy::Slim,
        Strategy::Incremental,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Fcs => "fcs",
            Strategy::Tcs => "tcs",
            Strategy::Slim => "slim",
            Strategy::Incremental => "incremental",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "fcs" => Some(Strategy::Fcs),
            "tcs" => Some(Strategy::Tcs),
            "slim" => Some(Strategy::Slim),
            "incremental" => Some(Strategy::Incremental),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The call sites selected by a strategy on a particular graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentationSet {
    pub strategy: Strategy,
    pub sites: BTreeSet<CallSite>,
}

impl InstrumentationSet {
    pub fn contains(&self, site: &CallSite) -> bool {
        self.sites.contains(site)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undeclared node `{name}`")]
    UndeclaredNode { line: usize, name: String },
    #[error("line {line}: duplicate call site `{site}`")]
    DuplicateSite { line: usize, site: CallSite },
    #[error("strategy `{0}` requires a non-empty target set")]
    EmptyTargets(Strategy),
    #[error("node `{0}` is not in the graph")]
    UnknownNode(String),
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
}

/// Parse the line-oriented graph format: `node <name>`, `edge <caller>
/// <callee> <site_id>`, `root <name>`, `target <name>`; `#` starts a comment.
///
/// Node declarations may appear after the edges that use them; validation is
/// whole-file. An empty target set parses fine and is rejected later by the
/// strategies that need targets.
pub fn parse_call_graph(text: &str) -> Result<CallGraph, GraphError> {
    let mut graph = CallGraph::default();
    // (line, kind, args) records deferred until all `node` lines are seen
    let mut refs: Vec<(usize, &str, Vec<&str>)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        let keyword = fields.next().unwrap();
        let args: Vec<&str> = fields.collect();
        match keyword {
            "node" => {
                let [name] = args[..] else {
                    return Err(GraphError::Syntax {
                        line,
                        msg: format!("expected `node <name>`, got `{content}`"),
                    });
                };
                if !valid_name(name) {
                    return Err(GraphError::Syntax {
                        line,
                        msg: format!("invalid node name `{name}`"),
                    });
                }
                graph.nodes.insert(name.to_string());
            }
            "edge" | "root" | "target" => refs.push((line, keyword, args)),
            other => {
                return Err(GraphError::Syntax {
                    line,
                    msg: format!("unknown record `{other}`"),
                });
            }
        }
    }

    let mut seen_sites: HashSet<CallSite> = HashSet::new();
    for (line, keyword, args) in refs {
        match keyword {
            "edge" => {
                let [caller, callee, site_id] = args[..] else {
                    return Err(GraphError::Syntax {
                        line,
                        msg: "expected `edge <caller> <callee> <site_id>`".to_string(),
                    });
                };
                let site_id: u32 = site_id.parse().map_err(|_| GraphError::Syntax {
                    line,
                    msg: format!("invalid site id `{site_id}`"),
                })?;
                for name in [caller, callee] {
                    if !graph.nodes.contains(name) {
                        return Err(GraphError::UndeclaredNode {
                            line,
                            name: name.to_string(),
                        });
                    }
                }
                let site = CallSite::new(caller, callee, site_id);
                if !seen_sites.insert(site.clone()) {
                    return Err(GraphError::DuplicateSite { line, site });
                }
                graph.edges.push(site);
            }
            "root" | "target" => {
                let [name] = args[..] else {
                    return Err(GraphError::Syntax {
                        line,
                        msg: format!("expected `{keyword} <name>`"),
                    });
                };
                if !graph.nodes.contains(name) {
                    return Err(GraphError::UndeclaredNode {
                        line,
                        name: name.to_string(),
                    });
                }
                if keyword == "root" {
                    graph.roots.insert(name.to_string());
                } else {
                    graph.targets.insert(name.to_string());
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(graph)
}

impl CallGraph {
    /// Nodes from which some target is reachable (a target reaches itself).
    fn nodes_reaching_targets(&self) -> BTreeSet<String> {
        let mut incoming: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &self.edges {
            incoming.entry(&e.callee).or_default().push(&e.caller);
        }
        let mut reached: BTreeSet<String> = BTreeSet::new();
        let mut queue: VecDeque<&str> = self.targets.iter().map(|t| t.as_str()).collect();
        while let Some(n) = queue.pop_front() {
            if !reached.insert(n.to_string()) {
                continue;
            }
            if let Some(callers) = incoming.get(n) {
                for &m in callers {
                    if !reached.contains(m) {
                        queue.push_back(m);
                    }
                }
            }
        }
        reached
    }

    fn require_targets(&self, strategy: Strategy) -> Result<(), GraphError> {
        if self.targets.is_empty() {
            Err(GraphError::EmptyTargets(strategy))
        } else {
            Ok(())
        }
    }
}

/// Call sites whose callee can reach (or is) a target function. A back edge
/// is kept exactly when its head reaches a target.
pub fn reachable_edges(g: &CallGraph) -> Result<BTreeSet<CallSite>, GraphError> {
    g.require_targets(Strategy::Tcs)?;
    let reaching = g.nodes_reaching_targets();
    Ok(g.edges
        .iter()
        .filter(|e| reaching.contains(&e.callee))
        .cloned()
        .collect())
}

/// Nodes with two or more outgoing target-reaching call sites.
pub fn branching_nodes(g: &CallGraph) -> Result<BTreeSet<String>, GraphError> {
    g.require_targets(Strategy::Slim)?;
    let mut out_count: BTreeMap<&str, usize> = BTreeMap::new();
    let tcs = reachable_edges(g)?;
    for e in &tcs {
        *out_count.entry(&e.caller).or_default() += 1;
    }
    Ok(out_count
        .into_iter()
        .filter(|&(_, c)| c >= 2)
        .map(|(n, _)| n.to_string())
        .collect())
}

/// Nodes with two or more outgoing call sites that reach the *same* target.
///
/// For each target a backward breadth-first search collects the nodes that
/// reach it (the visited-set check keeps back edges from looping), then any
/// node with more than one outgoing site into that visited set is selected.
/// The result is the union over all targets.
pub fn true_branching_nodes(g: &CallGraph) -> Result<BTreeSet<String>, GraphError> {
    g.require_targets(Strategy::Incremental)?;
    let mut incoming: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &g.edges {
        incoming.entry(&e.callee).or_default().push(&e.caller);
    }

    let mut selected: BTreeSet<String> = BTreeSet::new();
    for target in &g.targets {
        let mut visited: BTreeSet<&str> = BTreeSet::new();
        let mut queue: VecDeque<&str> = VecDeque::new();
        queue.push_back(target);
        while let Some(n) = queue.pop_front() {
            if !visited.insert(n) {
                continue;
            }
            if let Some(callers) = incoming.get(n) {
                for &m in callers {
                    if !visited.contains(m) {
                        queue.push_back(m);
                    }
                }
            }
        }
        for n in &visited {
            let count = g
                .edges
                .iter()
                .filter(|e| e.caller == *n && visited.contains(e.callee.as_str()))
                .count();
            if count > 1 {
                selected.insert(n.to_string());
            }
        }
    }
    Ok(selected)
}

/// Compute the call sites a strategy instruments.
///
/// Node-level strategies (`Slim`, `Incremental`) are lowered to call sites by
/// taking the selected nodes' target-reaching sites.
pub fn instrumentation_set(
    g: &CallGraph,
    strategy: Strategy,
) -> Result<InstrumentationSet, GraphError> {
    let sites = match strategy {
        Strategy::Fcs => g.edges.iter().cloned().collect(),
        Strategy::Tcs => reachable_edges(g)?,
        Strategy::Slim => {
            let branching = branching_nodes(g)?;
            reachable_edges(g)?
                .into_iter()
                .filter(|e| branching.contains(&e.caller))
                .collect()
        }
        Strategy::Incremental => {
            let branching = true_branching_nodes(g)?;
            reachable_edges(g)?
                .into_iter()
                .filter(|e| branching.contains(&e.caller))
                .collect()
        }
    };
    Ok(InstrumentationSet { strategy, sites })
}
