//! Loop transformations.
//!
//! Interchange, reversal and skewing are affine and compose into a square
//! schedule matrix acting on the iteration vector. Parallelization, tiling
//! and unrolling change the loop structure and are carried as tags.
//!
//! A [`TransformationSequence`] applies to a whole program. Each statement
//! sees the sub-sequence whose levels fit inside its own nest (see
//! [`TransformationSequence::restricted_to`]).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loop_ir::{Access, Program, StatementRef, Violation};

pub const MAX_XFORMS: usize = 4;
pub const TILE_SIZES: [u32; 5] = [2, 4, 8, 16, 32];
pub const UNROLL_FACTORS: [u32; 4] = [2, 4, 8, 16];
pub const SKEW_FACTORS: std::ops::RangeInclusive<i64> = 1..=4;

pub type IntMatrix = Vec<Vec<i64>>;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("{0} is not an affine transformation")]
    NotAffine(Transformation),
    #[error("loop level {level} out of range for depth {depth}")]
    LevelOutOfRange { level: usize, depth: usize },
}

/// Levels are 0-based, outermost first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Transformation {
    Interchange { a: usize, b: usize },
    Reversal { level: usize },
    /// Rewrites level `a` as `fa * i_a + fb * i_b`.
    Skewing { a: usize, b: usize, fa: i64, fb: i64 },
    Parallelize { level: usize },
    Tile { a: usize, b: usize, size_a: u32, size_b: u32 },
    Unroll { level: usize, factor: u32 },
}

impl Transformation {
    pub const KINDS: usize = 6;

    pub fn kind_index(&self) -> usize {
        match self {
            Transformation::Interchange { .. } => 0,
            Transformation::Reversal { .. } => 1,
            Transformation::Skewing { .. } => 2,
            Transformation::Parallelize { .. } => 3,
            Transformation::Tile { .. } => 4,
            Transformation::Unroll { .. } => 5,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(
            self,
            Transformation::Interchange { .. }
                | Transformation::Reversal { .. }
                | Transformation::Skewing { .. }
        )
    }

    pub fn levels(&self) -> Vec<usize> {
        match *self {
            Transformation::Interchange { a, b }
            | Transformation::Skewing { a, b, .. }
            | Transformation::Tile { a, b, .. } => vec![a, b],
            Transformation::Reversal { level }
            | Transformation::Parallelize { level }
            | Transformation::Unroll { level, .. } => vec![level],
        }
    }

    pub fn max_level(&self) -> usize {
        self.levels().into_iter().max().unwrap_or(0)
    }

    /// Parameter problems that do not depend on the program.
    fn check_params(&self) -> Option<String> {
        match *self {
            Transformation::Interchange { a, b } if a == b => {
                Some(format!("interchange of level {a} with itself"))
            }
            Transformation::Skewing { a, b, fa, fb } => {
                if a == b {
                    Some(format!("skewing level {a} by itself"))
                } else if fa != 1 {
                    Some(format!("non-unimodular skew (factor on level {a} is {fa}, must be 1)"))
                } else if !SKEW_FACTORS.contains(&fb) {
                    Some(format!("skew factor {fb} outside 1..=4"))
                } else {
                    None
                }
            }
            Transformation::Tile { a, b, size_a, size_b } => {
                if b != a + 1 {
                    Some(format!("tile levels {a},{b} are not adjacent"))
                } else if !TILE_SIZES.contains(&size_a) || !TILE_SIZES.contains(&size_b) {
                    Some(format!("tile sizes {size_a}x{size_b} not in {TILE_SIZES:?}"))
                } else {
                    None
                }
            }
            Transformation::Unroll { factor, .. } if !UNROLL_FACTORS.contains(&factor) => {
                Some(format!("unroll factor {factor} not in {UNROLL_FACTORS:?}"))
            }
            _ => None,
        }
    }

    /// The affine transformation undoing this one. Skew inverses carry a
    /// negative factor, so they are only meaningful as matrices.
    pub fn inverse(&self) -> Option<Transformation> {
        match *self {
            Transformation::Interchange { .. } | Transformation::Reversal { .. } => Some(self.clone()),
            Transformation::Skewing { a, b, fa: 1, fb } => Some(Transformation::Skewing { a, b, fa: 1, fb: -fb }),
            _ => None,
        }
    }
}

impl fmt::Display for Transformation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transformation::Interchange { a, b } => write!(f, "I({a},{b})"),
            Transformation::Reversal { level } => write!(f, "R({level})"),
            Transformation::Skewing { a, b, fa, fb } => write!(f, "S({a},{b},{fa},{fb})"),
            Transformation::Parallelize { level } => write!(f, "P({level})"),
            Transformation::Tile { a, b, size_a, size_b } => write!(f, "T({a},{b},{size_a},{size_b})"),
            Transformation::Unroll { level, factor } => write!(f, "U({level},{factor})"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformationSequence(pub Vec<Transformation>);

impl TransformationSequence {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transformation> {
        self.0.iter()
    }

    pub fn with(&self, t: Transformation) -> Self {
        let mut v = self.0.clone();
        v.push(t);
        Self(v)
    }

    /// The transformations whose levels all lie inside a nest of `depth`.
    pub fn restricted_to(&self, depth: usize) -> Self {
        Self(self.0.iter().filter(|t| t.max_level() < depth).cloned().collect())
    }

    /// Stable textual key: the JSON serialization.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("sequence serializes")
    }

    pub fn find_tile(&self) -> Option<(usize, usize, u32, u32)> {
        self.0.iter().find_map(|t| match *t {
            Transformation::Tile { a, b, size_a, size_b } => Some((a, b, size_a, size_b)),
            _ => None,
        })
    }

    pub fn find_unroll(&self) -> Option<(usize, u32)> {
        self.0.iter().find_map(|t| match *t {
            Transformation::Unroll { level, factor } => Some((level, factor)),
            _ => None,
        })
    }

    pub fn find_parallel(&self) -> Option<usize> {
        self.0.iter().find_map(|t| match *t {
            Transformation::Parallelize { level } => Some(level),
            _ => None,
        })
    }

    /// Affine inverse in reverse order; `None` if any entry is non-affine.
    pub fn formal_inverse(&self) -> Option<Self> {
        self.0
            .iter()
            .rev()
            .map(|t| t.inverse())
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }
}

impl fmt::Display for TransformationSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "[]");
        }
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

impl From<Vec<Transformation>> for TransformationSequence {
    fn from(v: Vec<Transformation>) -> Self {
        Self(v)
    }
}

pub fn identity(n: usize) -> IntMatrix {
    (0..n)
        .map(|r| (0..n).map(|c| i64::from(r == c)).collect())
        .collect()
}

pub fn matmul(a: &IntMatrix, b: &IntMatrix) -> IntMatrix {
    let n = a.len();
    let m = b.first().map_or(0, |r| r.len());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn check_level(level: usize, depth: usize) -> Result<(), TransformError> {
    if level >= depth {
        Err(TransformError::LevelOutOfRange { level, depth })
    } else {
        Ok(())
    }
}

/// Square matrix acting on the iteration vector.
pub fn affine_matrix(t: &Transformation, depth: usize) -> Result<IntMatrix, TransformError> {
    for l in t.levels() {
        check_level(l, depth)?;
    }
    let mut m = identity(depth);
    match *t {
        Transformation::Interchange { a, b } => m.swap(a, b),
        Transformation::Reversal { level } => m[level][level] = -1,
        Transformation::Skewing { a, b, fa, fb } => {
            m[a][a] = fa;
            m[a][b] = fb;
        }
        _ => return Err(TransformError::NotAffine(t.clone())),
    }
    Ok(m)
}

/// Product of the affine matrices in application order; later
/// transformations multiply on the left. Non-affine entries are skipped.
pub fn compose_schedule(seq: &TransformationSequence, depth: usize) -> Result<IntMatrix, TransformError> {
    let mut acc = identity(depth);
    for t in seq.iter().filter(|t| t.is_affine()) {
        acc = matmul(&affine_matrix(t, depth)?, &acc);
    }
    Ok(acc)
}

/// Exact integer inverse of [`compose_schedule`] for unimodular sequences.
pub fn inverse_schedule(seq: &TransformationSequence, depth: usize) -> Result<IntMatrix, TransformError> {
    let affine = TransformationSequence(seq.iter().filter(|t| t.is_affine()).cloned().collect());
    let inv = affine
        .formal_inverse()
        .expect("unimodular affine transformations are invertible");
    compose_schedule(&inv, depth)
}

/// Linear part of an access expressed in post-transformation iterators:
/// `A_lin * T^-1`, shape `k x depth`.
pub fn transformed_access(access: &Access, inverse: &IntMatrix) -> IntMatrix {
    let depth = inverse.len();
    let lin: IntMatrix = access.matrix.iter().map(|r| r[..depth].to_vec()).collect();
    matmul(&lin, inverse)
}

/// Every well-formed single transformation for a nest of `depth`, in a
/// fixed order. Interchanges are listed once per unordered pair.
pub fn candidates(depth: usize) -> Vec<Transformation> {
    let mut out = Vec::new();
    for a in 0..depth {
        for b in a + 1..depth {
            out.push(Transformation::Interchange { a, b });
        }
    }
    for level in 0..depth {
        out.push(Transformation::Reversal { level });
    }
    for a in 0..depth {
        for b in (0..depth).filter(|&b| b != a) {
            for fb in SKEW_FACTORS {
                out.push(Transformation::Skewing { a, b, fa: 1, fb });
            }
        }
    }
    for level in 0..depth {
        out.push(Transformation::Parallelize { level });
    }
    for a in 0..depth.saturating_sub(1) {
        for size_a in TILE_SIZES {
            for size_b in TILE_SIZES {
                out.push(Transformation::Tile { a, b: a + 1, size_a, size_b });
            }
        }
    }
    for level in 0..depth {
        for factor in UNROLL_FACTORS {
            out.push(Transformation::Unroll { level, factor });
        }
    }
    out
}

fn structural_violations(seq: &TransformationSequence, loc: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |m: String| Violation {
        location: loc.to_string(),
        message: m,
    };
    if seq.len() > MAX_XFORMS {
        out.push(v(format!("{} transformations, at most {MAX_XFORMS}", seq.len())));
    }
    let count = |k: usize| seq.iter().filter(|t| t.kind_index() == k).count();
    for (k, name) in [(3, "parallelize"), (4, "tile"), (5, "unroll")] {
        if count(k) > 1 {
            out.push(v(format!("duplicate {name}")));
        }
    }
    for t in seq.iter() {
        if let Some(m) = t.check_params() {
            out.push(v(m));
        }
    }
    out
}

/// Checks `seq` against one statement: structural limits, level bounds
/// for the statement's depth, and the conservative parallelization rule.
pub fn applicable(seq: &TransformationSequence, stmt: &StatementRef<'_>, program: &Program) -> Vec<Violation> {
    let loc = format!("statement {}", stmt.stmt.id);
    let mut out = structural_violations(seq, &loc);
    let depth = stmt.depth();
    for t in seq.iter() {
        if t.max_level() >= depth {
            out.push(Violation {
                location: loc.clone(),
                message: format!("{t} uses level {} but depth is {depth}", t.max_level()),
            });
        }
    }
    if out.is_empty() {
        if let Some(level) = seq.find_parallel() {
            out.extend(parallel_violations(seq, stmt, level, program));
        }
    }
    out
}

/// Program-wide applicability: structural limits, every transformation
/// touches at least one statement, and every statement accepts its
/// restricted sub-sequence.
pub fn applicable_program(seq: &TransformationSequence, program: &Program) -> Vec<Violation> {
    let mut out = structural_violations(seq, &program.id);
    let max_depth = program.max_depth();
    for t in seq.iter() {
        if t.max_level() >= max_depth {
            out.push(Violation {
                location: program.id.clone(),
                message: format!("{t} uses level {} but the deepest nest is {max_depth}", t.max_level()),
            });
        }
    }
    if !out.is_empty() {
        return out;
    }
    for s in program.statements() {
        out.extend(applicable(&seq.restricted_to(s.depth()), &s, program));
    }
    out
}

/// Whether post-transformation iterator `level` indexes `access`, for a
/// statement with schedule inverse `inverse`.
fn uses_level(access: &Access, inverse: &IntMatrix, level: usize) -> bool {
    transformed_access(access, inverse).iter().any(|row| row[level] != 0)
}

fn parallel_violations(
    seq: &TransformationSequence,
    stmt: &StatementRef<'_>,
    level: usize,
    program: &Program,
) -> Vec<Violation> {
    let mut out = Vec::new();
    // statements sharing the loops of `stmt` down to the parallel level
    let siblings: Vec<StatementRef<'_>> = program
        .statements()
        .into_iter()
        .filter(|s| {
            s.depth() > level
                && (0..=level).all(|l| std::ptr::eq(s.loops[l], stmt.loops[l]))
        })
        .collect();
    let loc = format!("statement {}", stmt.stmt.id);
    for w in &siblings {
        let w_seq = seq.restricted_to(w.depth());
        let Ok(inv) = inverse_schedule(&w_seq, w.depth()) else {
            continue;
        };
        if !uses_level(&w.stmt.write, &inv, level) {
            out.push(Violation {
                location: loc.clone(),
                message: format!(
                    "parallel level {level} does not index the write of {} (output dependence)",
                    w.stmt.id
                ),
            });
            continue;
        }
        for r in &siblings {
            let conflict = r
                .stmt
                .expr
                .reads()
                .into_iter()
                .any(|a| a.buffer == w.stmt.write.buffer && a.matrix != w.stmt.write.matrix);
            if conflict {
                out.push(Violation {
                    location: loc.clone(),
                    message: format!(
                        "parallel level {level}: {} reads buffer {} written by {} at a different index",
                        r.stmt.id, w.stmt.write.buffer, w.stmt.id
                    ),
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopRole {
    Whole,
    TileOuter,
    TileInner,
}

/// One loop after transformation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopDesc {
    /// Post-affine level this loop iterates over.
    pub level: usize,
    pub trip: i64,
    pub role: LoopRole,
    /// Effective unroll factor; the body runs `factor` times per iteration.
    pub unroll: Option<i64>,
    pub parallel: bool,
}

impl LoopDesc {
    /// Body instances executed per entry of this loop.
    pub fn instances(&self) -> i64 {
        self.trip * self.unroll.unwrap_or(1)
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1) / b
}

/// Loop order and trip counts of a statement after `seq` (already
/// restricted to the statement) is applied.
pub fn effective_loop_structure(trips: &[i64], seq: &TransformationSequence) -> Result<Vec<LoopDesc>, TransformError> {
    let depth = trips.len();
    for t in seq.iter() {
        check_level(t.max_level(), depth)?;
    }
    let mut trips = trips.to_vec();
    for t in seq.iter() {
        if let Transformation::Interchange { a, b } = *t {
            trips.swap(a, b);
        }
    }
    let mut loops: Vec<LoopDesc> = trips
        .iter()
        .enumerate()
        .map(|(level, &trip)| LoopDesc {
            level,
            trip,
            role: LoopRole::Whole,
            unroll: None,
            parallel: false,
        })
        .collect();
    if let Some((a, b, sa, sb)) = seq.find_tile() {
        let (ta, tb) = (trips[a], trips[b]);
        let (sa, sb) = (i64::from(sa).min(ta), i64::from(sb).min(tb));
        let mk = |level, trip, role| LoopDesc {
            level,
            trip,
            role,
            unroll: None,
            parallel: false,
        };
        let tiled = [
            mk(a, ceil_div(ta, sa), LoopRole::TileOuter),
            mk(b, ceil_div(tb, sb), LoopRole::TileOuter),
            mk(a, sa, LoopRole::TileInner),
            mk(b, sb, LoopRole::TileInner),
        ];
        loops.splice(a..=b, tiled);
    }
    if let Some((level, factor)) = seq.find_unroll() {
        let target = loops
            .iter_mut()
            .rev()
            .find(|l| l.level == level)
            .expect("level checked above");
        let f = i64::from(factor).min(target.trip);
        target.trip = ceil_div(target.trip, f);
        target.unroll = Some(f);
    }
    if let Some(level) = seq.find_parallel() {
        let target = loops
            .iter_mut()
            .find(|l| l.level == level)
            .expect("level checked above");
        target.parallel = true;
    }
    Ok(loops)
}
