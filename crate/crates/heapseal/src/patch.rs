//! Code-less patches and the frozen lookup table.
//!
//! A patch says: buffers allocated by function `fun` under calling context
//! `ccid` are vulnerable in the ways named by the 3-bit mask `t_bits`. The
//! online defender loads patches into a [`PatchTable`], freezes it, and
//! consults it at every allocation in O(1).

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::trace::AllocFun;

/// Vulnerability-type bit: contiguous out-of-bounds access.
pub const T_OVERFLOW: u8 = 1;
/// Vulnerability-type bit: access to freed memory.
pub const T_UAF: u8 = 2;
/// Vulnerability-type bit: use of never-written bytes.
pub const T_UNINIT: u8 = 4;

/// Allocation entry points a patch can key on. `Realloc` appears here (but
/// not in traces' `alloc` events) because a reallocated buffer's context is
/// re-stamped at the `realloc` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatchFun {
    Malloc,
    Calloc,
    Memalign,
    AlignedAlloc,
    Realloc,
}

impl PatchFun {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatchFun::Malloc => "malloc",
            PatchFun::Calloc => "calloc",
            PatchFun::Memalign => "memalign",
            PatchFun::AlignedAlloc => "aligned_alloc",
            PatchFun::Realloc => "realloc",
        }
    }

    pub fn parse(s: &str) -> Option<PatchFun> {
        match s {
            "malloc" => Some(PatchFun::Malloc),
            "calloc" => Some(PatchFun::Calloc),
            "memalign" => Some(PatchFun::Memalign),
            "aligned_alloc" => Some(PatchFun::AlignedAlloc),
            "realloc" => Some(PatchFun::Realloc),
            _ => None,
        }
    }
}

impl From<AllocFun> for PatchFun {
    fn from(f: AllocFun) -> Self {
        match f {
            AllocFun::Malloc => PatchFun::Malloc,
            AllocFun::Calloc => PatchFun::Calloc,
            AllocFun::Memalign => PatchFun::Memalign,
            AllocFun::AlignedAlloc => PatchFun::AlignedAlloc,
        }
    }
}

impl fmt::Display for PatchFun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reserved parameter list; no parameters are currently defined.
pub type Params = Vec<(String, String)>;

/// One code-less patch: ⟨allocation function, context id⟩ → vulnerability mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub fun: PatchFun,
    pub ccid: u64,
    pub t_bits: u8,
    pub params: Params,
}

impl Patch {
    pub fn new(fun: PatchFun, ccid: u64, t_bits: u8) -> Self {
        Self {
            fun,
            ccid,
            t_bits,
            params: Vec::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: t_bits {value} outside [1, 7]")]
    TBitsOutOfRange { line: usize, value: u64 },
    #[error("duplicate patch key ({fun}, {ccid:016x})")]
    DuplicateKey { fun: PatchFun, ccid: u64 },
    #[error("patch table is frozen")]
    Frozen,
}

/// Render patches in canonical file form: one `<fun> <ccid> <t_bits>` line
/// per patch, ccid as 16 lowercase hex digits, sorted by (fun, ccid).
pub fn serialize_patches(patches: &[Patch]) -> String {
    let mut sorted: Vec<&Patch> = patches.iter().collect();
    sorted.sort_by_key(|p| (p.fun, p.ccid));
    let mut out = String::new();
    for p in sorted {
        out.push_str(&format!("{} {:016x} {}", p.fun, p.ccid, p.t_bits));
        for (k, v) in &p.params {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push('\n');
    }
    out
}

/// Parse a patch file. Duplicate ⟨fun, ccid⟩ keys are rejected: the offline
/// generator merges warnings per origin before writing the file.
pub fn parse_patches(text: &str) -> Result<Vec<Patch>, PatchError> {
    let mut patches: Vec<Patch> = Vec::new();
    let mut seen: HashMap<(PatchFun, u64), ()> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(PatchError::Syntax {
                line,
                msg: "expected `<fun> <ccid> <t_bits> [key=value ...]`".to_string(),
            });
        }
        let fun = PatchFun::parse(fields[0]).ok_or_else(|| PatchError::Syntax {
            line,
            msg: format!("unknown allocation function `{}`", fields[0]),
        })?;
        let ccid_s = fields[1];
        if ccid_s.len() != 16 || !ccid_s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            return Err(PatchError::Syntax {
                line,
                msg: format!("ccid `{ccid_s}` is not 16 lowercase hex digits"),
            });
        }
        let ccid = u64::from_str_radix(ccid_s, 16).map_err(|_| PatchError::Syntax {
            line,
            msg: format!("invalid ccid `{ccid_s}`"),
        })?;
        let t_raw: u64 = fields[2].parse().map_err(|_| PatchError::Syntax {
            line,
            msg: format!("invalid t_bits `{}`", fields[2]),
        })?;
        if !(1..=7).contains(&t_raw) {
            return Err(PatchError::TBitsOutOfRange { line, value: t_raw });
        }
        let mut params = Params::new();
        for tok in &fields[3..] {
            let Some((k, v)) = tok.split_once('=') else {
                return Err(PatchError::Syntax {
                    line,
                    msg: format!("malformed parameter `{tok}`"),
                });
            };
            params.push((k.to_string(), v.to_string()));
        }
        if seen.insert((fun, ccid), ()).is_some() {
            return Err(PatchError::DuplicateKey { fun, ccid });
        }
        patches.push(Patch {
            fun,
            ccid,
            t_bits: t_raw as u8,
            params,
        });
    }
    Ok(patches)
}

/// Hash table from ⟨fun, ccid⟩ to (t_bits, params). Once frozen no insert
/// succeeds, mirroring the read-only remapping of the loaded table.
#[derive(Debug, Clone, Default)]
pub struct PatchTable {
    entries: HashMap<(PatchFun, u64), (u8, Params)>,
    frozen: bool,
}

impl PatchTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty frozen table: every lookup misses.
    pub fn empty() -> Self {
        Self {
            entries: HashMap::new(),
            frozen: true,
        }
    }

    pub fn insert(&mut self, patch: Patch) -> Result<(), PatchError> {
        if self.frozen {
            return Err(PatchError::Frozen);
        }
        if self.entries.contains_key(&(patch.fun, patch.ccid)) {
            return Err(PatchError::DuplicateKey {
                fun: patch.fun,
                ccid: patch.ccid,
            });
        }
        self.entries
            .insert((patch.fun, patch.ccid), (patch.t_bits, patch.params));
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact-match lookup on ⟨fun, ccid⟩.
    pub fn lookup(&self, fun: PatchFun, ccid: u64) -> Option<(u8, &Params)> {
        self.entries.get(&(fun, ccid)).map(|(t, p)| (*t, p))
    }
}

/// Build a frozen table from a patch list.
pub fn build_table(patches: &[Patch]) -> Result<PatchTable, PatchError> {
    let mut table = PatchTable::new();
    for p in patches {
        table.insert(p.clone())?;
    }
    table.freeze();
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn serialize_single_patch() {
        let p = Patch::new(PatchFun::Malloc, 0x7, T_OVERFLOW);
        assert_eq!(serialize_patches(&[p]), "malloc 0000000000000007 1\n");
    }

    #[test]
    fn serialize_heartbleed_style_combo() {
        let p = Patch::new(PatchFun::Malloc, 0xdead_beef_0000_0001, T_UNINIT | T_OVERFLOW);
        assert_eq!(serialize_patches(&[p]), "malloc deadbeef00000001 5\n");
    }

    #[test]
    fn serialize_sorts_by_fun_then_ccid() {
        let out = serialize_patches(&[
            Patch::new(PatchFun::Realloc, 1, 1),
            Patch::new(PatchFun::Malloc, 9, 2),
            Patch::new(PatchFun::Malloc, 3, 4),
        ]);
        assert_eq!(
            out,
            "malloc 0000000000000003 4\nmalloc 0000000000000009 2\nrealloc 0000000000000001 1\n"
        );
    }

    #[test]
    fn parse_rejects_out_of_range_t_bits() {
        let err = parse_patches("malloc 0000000000000000 8\n").unwrap_err();
        assert_eq!(
            err,
            PatchError::TBitsOutOfRange { line: 1, value: 8 }
        );
        assert!(parse_patches("malloc 0000000000000000 0\n").is_err());
    }

    #[test]
    fn parse_rejects_bad_hex_and_duplicates() {
        assert!(parse_patches("malloc 00 1\n").is_err());
        assert!(parse_patches("malloc 00000000000000ZZ 1\n").is_err());
        assert!(parse_patches("malloc 000000000000000A 1\n").is_err()); // uppercase
        let err = parse_patches(
            "malloc 0000000000000001 1\nmalloc 0000000000000001 2\n",
        )
        .unwrap_err();
        assert!(matches!(err, PatchError::DuplicateKey { .. }));
    }

    #[test]
    fn empty_table_always_misses() {
        let t = build_table(&[]).unwrap();
        assert!(t.is_frozen());
        assert!(t.lookup(PatchFun::Malloc, 0).is_none());
    }

    #[test]
    fn table_retrieves_all_entries() {
        let patches: Vec<Patch> = (0..5)
            .map(|i| Patch::new(PatchFun::Malloc, i, 1 + (i as u8 % 7)))
            .collect();
        let t = build_table(&patches).unwrap();
        assert_eq!(t.len(), 5);
        for p in &patches {
            assert_eq!(t.lookup(p.fun, p.ccid).unwrap().0, p.t_bits);
        }
    }

    #[test]
    fn insert_after_freeze_fails() {
        let mut t = build_table(&[Patch::new(PatchFun::Malloc, 1, 1)]).unwrap();
        let err = t.insert(Patch::new(PatchFun::Malloc, 2, 1)).unwrap_err();
        assert_eq!(err, PatchError::Frozen);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn build_rejects_duplicate_keys() {
        let err = build_table(&[
            Patch::new(PatchFun::Malloc, 1, 1),
            Patch::new(PatchFun::Malloc, 1, 2),
        ])
        .unwrap_err();
        assert!(matches!(err, PatchError::DuplicateKey { .. }));
    }

    #[test]
    fn lookup_is_exact_match() {
        let t = build_table(&[Patch::new(PatchFun::Malloc, 0x10, 3)]).unwrap();
        assert_eq!(t.lookup(PatchFun::Malloc, 0x10).unwrap().0, 3);
        assert!(t.lookup(PatchFun::Calloc, 0x10).is_none()); // same ccid, other fun
        assert!(t.lookup(PatchFun::Malloc, 0x11).is_none()); // one bit off
    }

    fn arb_fun() -> impl proptest::strategy::Strategy<Value = PatchFun> {
        prop_oneof![
            Just(PatchFun::Malloc),
            Just(PatchFun::Calloc),
            Just(PatchFun::Memalign),
            Just(PatchFun::AlignedAlloc),
            Just(PatchFun::Realloc),
        ]
    }

    proptest! {
        #[test]
        fn round_trip_and_lookup_agreement(
            keys in prop::collection::btree_set((0u8..5, any::<u64>()), 0..20),
            bits in prop::collection::vec(1u8..8, 20),
        ) {
            let patches: Vec<Patch> = keys
                .iter()
                .zip(&bits)
                .map(|((f, ccid), t)| {
                    let fun = [PatchFun::Malloc, PatchFun::Calloc, PatchFun::Memalign,
                               PatchFun::AlignedAlloc, PatchFun::Realloc][*f as usize];
                    Patch::new(fun, *ccid, *t)
                })
                .collect();
            let text = serialize_patches(&patches);
            let reparsed = parse_patches(&text).unwrap();
            // canonical form: sorted by (fun, ccid)
            prop_assert_eq!(serialize_patches(&reparsed), text);

            let before = build_table(&patches).unwrap();
            let after = build_table(&reparsed).unwrap();
            for p in &patches {
                prop_assert_eq!(
                    before.lookup(p.fun, p.ccid).map(|(t, _)| t),
                    after.lookup(p.fun, p.ccid).map(|(t, _)| t)
                );
            }
        }

        #[test]
        fn lookup_misses_for_absent_keys(fun in arb_fun(), ccid in any::<u64>()) {
            let t = build_table(&[Patch::new(PatchFun::Malloc, 42, 1)]).unwrap();
            prop_assume!(!(fun == PatchFun::Malloc && ccid == 42));
            prop_assert!(t.lookup(fun, ccid).is_none());
        }
    }
}
