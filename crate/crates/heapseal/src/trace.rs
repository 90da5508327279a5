//! The memory-event trace format.
//!
//! A trace is the artifact's stand-in for executing an instrumented program:
//! call/return events drive the context encoder, allocation and access
//! events drive the heap models. Addressing is buffer-relative
//! (`buf_id` + signed offset) so the same trace replays under both the
//! offline shadow heap and the online hardened heap; overflows are simply
//! out-of-bounds offsets.

use std::fmt;

use thiserror::Error;

/// Heap allocation entry points a trace can invoke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AllocFun {
    Malloc,
    Calloc,
    Memalign,
    AlignedAlloc,
}

impl AllocFun {
    pub fn as_str(&self) -> &'static str {
        match self {
            AllocFun::Malloc => "malloc",
            AllocFun::Calloc => "calloc",
            AllocFun::Memalign => "memalign",
            AllocFun::AlignedAlloc => "aligned_alloc",
        }
    }

    pub fn parse(s: &str) -> Option<AllocFun> {
        match s {
            "malloc" => Some(AllocFun::Malloc),
            "calloc" => Some(AllocFun::Calloc),
            "memalign" => Some(AllocFun::Memalign),
            "aligned_alloc" => Some(AllocFun::AlignedAlloc),
            _ => None,
        }
    }

    /// Aligned allocators carry an explicit alignment argument.
    pub fn is_aligned(&self) -> bool {
        matches!(self, AllocFun::Memalign | AllocFun::AlignedAlloc)
    }
}

impl fmt::Display for AllocFun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a read value is consumed. Only `branch`, `addr` and `syscall` sinks
/// trigger validity checking; a plain `copy` moves data without deciding
/// anything, so checking it would flag legal padding reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sink {
    Copy,
    Branch,
    Addr,
    Syscall,
}

impl Sink {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sink::Copy => "copy",
            Sink::Branch => "branch",
            Sink::Addr => "addr",
            Sink::Syscall => "syscall",
        }
    }

    pub fn parse(s: &str) -> Option<Sink> {
        match s {
            "copy" => Some(Sink::Copy),
            "branch" => Some(Sink::Branch),
            "addr" => Some(Sink::Addr),
            "syscall" => Some(Sink::Syscall),
            _ => None,
        }
    }

    /// Whether a read through this sink checks validity bits.
    pub fn checked(&self) -> bool {
        !matches!(self, Sink::Copy)
    }
}

impl fmt::Display for Sink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One trace event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Call {
        caller: String,
        callee: String,
        site_id: u32,
    },
    Ret,
    Alloc {
        fun: AllocFun,
        buf_id: String,
        size: u64,
        align: Option<u64>,
    },
    Realloc {
        old_buf_id: String,
        new_buf_id: String,
        new_size: u64,
    },
    Free {
        buf_id: String,
    },
    Write {
        buf_id: String,
        offset: i64,
        len: u64,
    },
    Read {
        buf_id: String,
        offset: i64,
        len: u64,
        sink: Sink,
    },
    Copy {
        src_buf_id: String,
        src_off: i64,
        dst_buf_id: String,
        dst_off: i64,
        len: u64,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Call {
                caller,
                callee,
                site_id,
            } => write!(f, "call {caller} {callee} {site_id}"),
            Event::Ret => write!(f, "ret"),
            Event::Alloc {
                fun,
                buf_id,
                size,
                align,
            } => match align {
                Some(a) => write!(f, "alloc {fun} {buf_id} {size} {a}"),
                None => write!(f, "alloc {fun} {buf_id} {size}"),
            },
            Event::Realloc {
                old_buf_id,
                new_buf_id,
                new_size,
            } => write!(f, "realloc {old_buf_id} {new_buf_id} {new_size}"),
            Event::Free { buf_id } => write!(f, "free {buf_id}"),
            Event::Write {
                buf_id,
                offset,
                len,
            } => write!(f, "write {buf_id} {offset} {len}"),
            Event::Read {
                buf_id,
                offset,
                len,
                sink,
            } => write!(f, "read {buf_id} {offset} {len} {sink}"),
            Event::Copy {
                src_buf_id,
                src_off,
                dst_buf_id,
                dst_off,
                len,
            } => write!(f, "copy {src_buf_id} {src_off} {dst_buf_id} {dst_off} {len}"),
        }
    }
}

/// An ordered, immutable event list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub events: Vec<Event>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
}

fn parse_id(line: usize, s: &str) -> Result<String, TraceError> {
    if valid_id(s) {
        Ok(s.to_string())
    } else {
        Err(syntax(line, format!("invalid identifier `{s}`")))
    }
}

fn parse_u64(line: usize, what: &str, s: &str) -> Result<u64, TraceError> {
    s.parse()
        .map_err(|_| syntax(line, format!("invalid {what} `{s}`")))
}

fn parse_len(line: usize, s: &str) -> Result<u64, TraceError> {
    let v = parse_u64(line, "length", s)?;
    if v == 0 {
        return Err(syntax(line, "length must be at least 1"));
    }
    Ok(v)
}

fn parse_size(line: usize, s: &str) -> Result<u64, TraceError> {
    let v = parse_u64(line, "size", s)?;
    if v == 0 {
        return Err(syntax(line, "size must be at least 1"));
    }
    Ok(v)
}

fn parse_offset(line: usize, s: &str) -> Result<i64, TraceError> {
    s.parse()
        .map_err(|_| syntax(line, format!("invalid offset `{s}`")))
}

/// Parse the line-oriented trace format. Validation is purely syntactic:
/// semantic violations (double free, use after free, out-of-bounds offsets)
/// are events for the analyzers to observe, not parse errors.
pub fn parse_trace(text: &str) -> Result<Trace, TraceError> {
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        let keyword = fields.next().unwrap();
        let args: Vec<&str> = fields.collect();
        let event = match keyword {
            "call" => {
                let [caller, callee, site_id] = args[..] else {
                    return Err(syntax(line, "expected `call <caller> <callee> <site_id>`"));
                };
                Event::Call {
                    caller: parse_id(line, caller)?,
                    callee: parse_id(line, callee)?,
                    site_id: site_id
                        .parse()
                        .map_err(|_| syntax(line, format!("invalid site id `{site_id}`")))?,
                }
            }
            "ret" => {
                if !args.is_empty() {
                    return Err(syntax(line, "`ret` takes no arguments"));
                }
                Event::Ret
            }
            "alloc" => {
                let (fun_s, rest) = args
                    .split_first()
                    .ok_or_else(|| syntax(line, "expected `alloc <fun> <id> <size> [align]`"))?;
                let fun = AllocFun::parse(fun_s)
                    .ok_or_else(|| syntax(line, format!("unknown allocation function `{fun_s}`")))?;
                match (fun.is_aligned(), rest) {
                    (false, [id, size]) => Event::Alloc {
                        fun,
                        buf_id: parse_id(line, id)?,
                        size: parse_size(line, size)?,
                        align: None,
                    },
                    (true, [id, size, align]) => Event::Alloc {
                        fun,
                        buf_id: parse_id(line, id)?,
                        size: parse_size(line, size)?,
                        align: Some(parse_u64(line, "alignment", align)?),
                    },
                    (true, [_, _]) => {
                        return Err(syntax(line, format!("`{fun_s}` requires an align argument")));
                    }
                    _ => {
                        return Err(syntax(line, "expected `alloc <fun> <id> <size> [align]`"));
                    }
                }
            }
            "realloc" => {
                let [old, new, size] = args[..] else {
                    return Err(syntax(line, "expected `realloc <old> <new> <size>`"));
                };
                Event::Realloc {
                    old_buf_id: parse_id(line, old)?,
                    new_buf_id: parse_id(line, new)?,
                    new_size: parse_size(line, size)?,
                }
            }
            "free" => {
                let [id] = args[..] else {
                    return Err(syntax(line, "expected `free <id>`"));
                };
                Event::Free {
                    buf_id: parse_id(line, id)?,
                }
            }
            "write" => {
                let [id, off, len] = args[..] else {
                    return Err(syntax(line, "expected `write <id> <offset> <len>`"));
                };
                Event::Write {
                    buf_id: parse_id(line, id)?,
                    offset: parse_offset(line, off)?,
                    len: parse_len(line, len)?,
                }
            }
            "read" => {
                let [id, off, len, sink] = args[..] else {
                    return Err(syntax(line, "expected `read <id> <offset> <len> <sink>`"));
                };
                Event::Read {
                    buf_id: parse_id(line, id)?,
                    offset: parse_offset(line, off)?,
                    len: parse_len(line, len)?,
                    sink: Sink::parse(sink)
                        .ok_or_else(|| syntax(line, format!("unknown sink `{sink}`")))?,
                }
            }
            "copy" => {
                let [src, soff, dst, doff, len] = args[..] else {
                    return Err(syntax(
                        line,
                        "expected `copy <src> <soff> <dst> <doff> <len>`",
                    ));
                };
                Event::Copy {
                    src_buf_id: parse_id(line, src)?,
                    src_off: parse_offset(line, soff)?,
                    dst_buf_id: parse_id(line, dst)?,
                    dst_off: parse_offset(line, doff)?,
                    len: parse_len(line, len)?,
                }
            }
            other => return Err(syntax(line, format!("unknown event keyword `{other}`"))),
        };
        events.push(event);
    }
    Ok(Trace { events })
}

/// Render a trace in canonical file form (one event per line, LF endings).
pub fn serialize_trace(trace: &Trace) -> String {
    let mut out = String::new();
    for e in &trace.events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_basic_lifecycle() {
        let t = parse_trace("alloc malloc b1 64\nwrite b1 0 64\nfree b1\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(
            t.events[0],
            Event::Alloc {
                fun: AllocFun::Malloc,
                buf_id: "b1".to_string(),
                size: 64,
                align: None,
            }
        );
    }

    #[test]
    fn parse_read_with_copy_sink() {
        let t = parse_trace("read b1 60 8 copy\n").unwrap();
        assert_eq!(
            t.events[0],
            Event::Read {
                buf_id: "b1".to_string(),
                offset: 60,
                len: 8,
                sink: Sink::Copy,
            }
        );
    }

    #[test]
    fn memalign_without_align_is_an_error() {
        let err = parse_trace("alloc memalign b2 100\n").unwrap_err();
        assert!(matches!(err, TraceError::Syntax { line: 1, .. }));
    }

    #[test]
    fn malloc_with_align_is_an_error() {
        assert!(parse_trace("alloc malloc b1 64 16\n").is_err());
    }

    #[test]
    fn negative_offsets_parse() {
        let t = parse_trace("write b1 -8 4\n").unwrap();
        assert_eq!(
            t.events[0],
            Event::Write {
                buf_id: "b1".to_string(),
                offset: -8,
                len: 4,
            }
        );
    }

    #[test]
    fn semantic_violations_are_not_parse_errors() {
        // double free and UAF are the analyzers' business
        let t = parse_trace("alloc malloc b1 8\nfree b1\nfree b1\nwrite b1 0 1\n").unwrap();
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn rejects_unknown_keyword_and_bad_integers() {
        assert!(parse_trace("dealloc b1\n").is_err());
        assert!(parse_trace("write b1 zero 4\n").is_err());
        assert!(parse_trace("write b1 0 0\n").is_err());
        assert!(parse_trace("read b1 0 4 register\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let t = parse_trace("# setup\n\nalloc malloc b1 8 # first\n").unwrap();
        assert_eq!(t.len(), 1);
    }

    fn arb_id() -> impl proptest::strategy::Strategy<Value = String> {
        "[A-Za-z0-9_.]{1,8}"
    }

    fn arb_event() -> impl proptest::strategy::Strategy<Value = Event> {
        prop_oneof![
            (arb_id(), arb_id(), any::<u32>()).prop_map(|(caller, callee, site_id)| Event::Call {
                caller,
                callee,
                site_id
            }),
            Just(Event::Ret),
            (arb_id(), 1u64..1 << 40).prop_map(|(buf_id, size)| Event::Alloc {
                fun: AllocFun::Malloc,
                buf_id,
                size,
                align: None,
            }),
            (arb_id(), 1u64..1 << 40, 0u32..16).prop_map(|(buf_id, size, a)| Event::Alloc {
                fun: AllocFun::Memalign,
                buf_id,
                size,
                align: Some(1 << a),
            }),
            (arb_id(), arb_id(), 1u64..1 << 40).prop_map(|(o, n, s)| Event::Realloc {
                old_buf_id: o,
                new_buf_id: n,
                new_size: s,
            }),
            arb_id().prop_map(|buf_id| Event::Free { buf_id }),
            (arb_id(), any::<i64>(), 1u64..1 << 40).prop_map(|(buf_id, offset, len)| {
                Event::Write {
                    buf_id,
                    offset,
                    len,
                }
            }),
            (
                arb_id(),
                any::<i64>(),
                1u64..1 << 40,
                prop_oneof![
                    Just(Sink::Copy),
                    Just(Sink::Branch),
                    Just(Sink::Addr),
                    Just(Sink::Syscall)
                ]
            )
                .prop_map(|(buf_id, offset, len, sink)| Event::Read {
                    buf_id,
                    offset,
                    len,
                    sink,
                }),
            (arb_id(), any::<i64>(), arb_id(), any::<i64>(), 1u64..1 << 40).prop_map(
                |(src_buf_id, src_off, dst_buf_id, dst_off, len)| Event::Copy {
                    src_buf_id,
                    src_off,
                    dst_buf_id,
                    dst_off,
                    len,
                }
            ),
        ]
    }

    proptest! {
        #[test]
        fn parse_serialize_round_trip(events in prop::collection::vec(arb_event(), 0..40)) {
            let trace = Trace { events };
            let text = serialize_trace(&trace);
            let reparsed = parse_trace(&text).unwrap();
            prop_assert_eq!(reparsed, trace);
        }
    }
}
