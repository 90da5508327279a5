//! Calling-context encoding during trace replay.
//!
//! The current context id lives in a single integer `V`. At an instrumented
//! call site `V` becomes `3*t + c`, where `t` is the caller's value and `c`
//! a per-site pseudo-random constant; returns restore the caller's value.
//! Uninstrumented sites leave `V` untouched, so two contexts differing only
//! in uninstrumented sites deliberately share an id.

use std::collections::VecDeque;

use thiserror::Error;

use crate::callgraph::{CallGraph, CallSite, GraphError, InstrumentationSet};

/// Context id at program start, before any instrumented call.
pub const INITIAL_CCID: u64 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("return with empty call stack")]
    ReturnAtDepthZero,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic keyed constant for a call site.
///
/// FNV-1a over the site's textual identity, then a 64-bit finalizer keyed by
/// the seed. Stable across platforms so pinned fixture values hold anywhere.
pub fn site_constant(site: &CallSite, seed: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    eat(site.caller.as_bytes());
    eat(&[0]);
    eat(site.callee.as_bytes());
    eat(&[0]);
    eat(&site.site_id.to_le_bytes());
    mix64(h ^ mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Mutable encoder state for one single-threaded replay.
#[derive(Debug, Clone, Default)]
pub struct EncoderState {
    v_current: u64,
    frame_stack: Vec<u64>,
}

impl EncoderState {
    pub fn new() -> Self {
        Self {
            v_current: INITIAL_CCID,
            frame_stack: Vec::new(),
        }
    }

    /// The current calling context id.
    pub fn ccid(&self) -> u64 {
        self.v_current
    }

    /// Current call depth.
    pub fn depth(&self) -> usize {
        self.frame_stack.len()
    }

    /// Enter a call. Saves the caller's value; an instrumented site updates
    /// `V` to `3*t + c` (wrapping), an uninstrumented one leaves it alone.
    pub fn encode_call(&mut self, instrumented: bool, c: u64) {
        let t = self.v_current;
        self.frame_stack.push(t);
        if instrumented {
            self.v_current = t.wrapping_mul(3).wrapping_add(c);
        }
    }

    /// Leave the current call, restoring the caller's value.
    pub fn encode_return(&mut self) -> Result<(), EncoderError> {
        self.v_current = self
            .frame_stack
            .pop()
            .ok_or(EncoderError::ReturnAtDepthZero)?;
        Ok(())
    }
}

/// Replay a whole root-to-target path and return the context id at the end.
pub fn replay_path(path: &[CallSite], instr: &InstrumentationSet, seed: u64) -> u64 {
    let mut state = EncoderState::new();
    for site in path {
        state.encode_call(instr.contains(site), site_constant(site, seed));
    }
    state.ccid()
}

/// Enumerate every call path from a root to `target` with at most
/// `max_depth` edges, paired with the context id its replay produces.
///
/// Cycles are allowed up to the depth bound. If the target is itself a root
/// the empty path is included. Output is ordered lexicographically by path.
pub fn enumerate_contexts(
    g: &CallGraph,
    instr: &InstrumentationSet,
    target: &str,
    max_depth: usize,
    seed: u64,
) -> Result<Vec<(Vec<CallSite>, u64)>, GraphError> {
    if !g.nodes.contains(target) {
        return Err(GraphError::UnknownNode(target.to_string()));
    }
    let mut out: Vec<(Vec<CallSite>, u64)> = Vec::new();
    let mut edges_sorted: Vec<&CallSite> = g.edges.iter().collect();
    edges_sorted.sort();

    // iterative DFS in sorted edge order yields paths in lexicographic order
    let mut stack: VecDeque<(String, Vec<CallSite>)> = VecDeque::new();
    for root in &g.roots {
        stack.push_back((root.clone(), Vec::new()));
    }
    let mut work: Vec<(String, Vec<CallSite>)> = stack.into_iter().collect();
    work.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    work.reverse();
    while let Some((node, path)) = work.pop() {
        if node == target {
            let ccid = replay_path(&path, instr, seed);
            out.push((path.clone(), ccid));
        }
        if path.len() == max_depth {
            continue;
        }
        // push in reverse-sorted order so the smallest edge is popped first
        for e in edges_sorted.iter().rev().filter(|e| e.caller == node) {
            let mut next = path.clone();
            next.push((*e).clone());
            work.push((e.callee.clone(), next));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
