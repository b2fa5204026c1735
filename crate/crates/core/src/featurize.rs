//! Fixed-length computation vectors and AST-shaped program trees.
//!
//! A vector is the concatenation of five segments:
//!
//! | segment | contents                                                        |
//! |---------|-----------------------------------------------------------------|
//! | domain  | per level `(lo, hi, log2 trip, present)`                        |
//! | access  | write then reads, each a `4 x (max_depth + 1)` block; a count   |
//! | ops     | post-order one-hot rows of operations and constant leaves       |
//! | sched   | composed schedule matrix, then one row per transformation       |
//! | tags    | parallel flag per level; tile `(flag, level, sizes)`; unroll    |
//!
//! Access rows hold the iterator coefficients of the statement's own depth
//! followed directly by the constant, then padding. All entries are scaled
//! by fixed constants from [`FeatureConfig`].

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loop_ir::{ExprItem, LoopNode, Node, Program, StatementRef, MAX_BUFFER_DIMS, MAX_DEPTH};
use crate::transform::{compose_schedule, Transformation, TransformError, TransformationSequence};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("statement {statement}: {what} {count} exceeds capacity {capacity}")]
    Capacity {
        statement: String,
        what: &'static str,
        count: usize,
        capacity: usize,
    },
    #[error("statement {statement}: depth {depth} exceeds max_depth {max_depth}")]
    TooDeep {
        statement: String,
        depth: usize,
        max_depth: usize,
    },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("vector dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub max_depth: usize,
    pub max_accesses: usize,
    pub max_ops: usize,
    pub max_xforms: usize,
    pub op_kinds: usize,
    pub max_buffer_dims: usize,
    pub pad_value: f64,
    /// Divisor for loop bounds.
    pub bound_scale: f64,
    /// Divisor for access and schedule matrix entries.
    pub matrix_scale: f64,
    /// Divisor for `log2(trip)`.
    pub log_trip_scale: f64,
    /// Divisor for `log2(tile size)`.
    pub log_tile_scale: f64,
    /// Divisor for `log2(unroll factor)`.
    pub log_unroll_scale: f64,
    /// Divisor for skew factors.
    pub skew_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            max_depth: 4,
            max_accesses: 6,
            max_ops: 16,
            max_xforms: 4,
            op_kinds: 7,
            max_buffer_dims: MAX_BUFFER_DIMS,
            pad_value: 0.0,
            bound_scale: 1024.0,
            matrix_scale: 4.0,
            log_trip_scale: 10.0,
            log_tile_scale: 5.0,
            log_unroll_scale: 4.0,
            skew_scale: 4.0,
        }
    }
}

pub const DOMAIN_FIELDS: usize = 4;
pub const XFORM_PARAMS: usize = 2;
/// Index of the constant-leaf column in an ops row.
pub const CONST_LEAF: usize = 6;

/// Offsets of each segment inside a vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub domain: Range<usize>,
    pub access: Range<usize>,
    pub ops: Range<usize>,
    pub sched: Range<usize>,
    pub tags: Range<usize>,
}

impl SegmentLayout {
    pub fn total(&self) -> usize {
        self.tags.end
    }

    pub fn segments(&self) -> [(&'static str, Range<usize>); 5] {
        [
            ("domain", self.domain.clone()),
            ("access", self.access.clone()),
            ("ops", self.ops.clone()),
            ("sched", self.sched.clone()),
            ("tags", self.tags.clone()),
        ]
    }
}

impl FeatureConfig {
    pub fn access_block(&self) -> usize {
        self.max_buffer_dims * (self.max_depth + 1)
    }

    pub fn xform_row(&self) -> usize {
        Transformation::KINDS + XFORM_PARAMS
    }

    pub fn layout(&self) -> SegmentLayout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let domain = take(self.max_depth * DOMAIN_FIELDS);
        let access = take(self.max_accesses * self.access_block() + 1);
        let ops = take(self.max_ops * self.op_kinds);
        let sched = take(self.max_depth * self.max_depth + self.max_xforms * self.xform_row());
        let tags = take(self.max_depth + 4 + 2);
        SegmentLayout {
            domain,
            access,
            ops,
            sched,
            tags,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.layout().total()
    }

    pub fn validate(&self) -> Result<(), String> {
        let sizes = [
            self.max_depth,
            self.max_accesses,
            self.max_ops,
            self.max_xforms,
            self.op_kinds,
            self.max_buffer_dims,
        ];
        if sizes.contains(&0) {
            return Err("all capacities must be positive".into());
        }
        if self.op_kinds != 7 {
            return Err(format!("op_kinds must be 7 (six operators and a constant leaf), got {}", self.op_kinds));
        }
        let scales = [
            self.bound_scale,
            self.matrix_scale,
            self.log_trip_scale,
            self.log_tile_scale,
            self.log_unroll_scale,
            self.skew_scale,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err("normalization constants must be positive".into());
        }
        Ok(())
    }
}

pub fn total_dim(config: &FeatureConfig) -> usize {
    config.total_dim()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComputationVector(pub Vec<f64>);

impl ComputationVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn segment(&self, range: Range<usize>) -> &[f64] {
        &self.0[range]
    }
}

fn capacity(stmt: &StatementRef<'_>, what: &'static str, count: usize, capacity: usize) -> Result<(), FeatureError> {
    if count > capacity {
        Err(FeatureError::Capacity {
            statement: stmt.stmt.id.clone(),
            what,
            count,
            capacity,
        })
    } else {
        Ok(())
    }
}

/// `seq` is the program-wide sequence; only the part that fits the
/// statement's depth is encoded.
pub fn featurize_statement(
    stmt: &StatementRef<'_>,
    seq: &TransformationSequence,
    config: &FeatureConfig,
) -> Result<ComputationVector, FeatureError> {
    let depth = stmt.depth();
    if depth > config.max_depth {
        return Err(FeatureError::TooDeep {
            statement: stmt.stmt.id.clone(),
            depth,
            max_depth: config.max_depth,
        });
    }
    let accesses = stmt.stmt.accesses();
    capacity(stmt, "access count", accesses.len(), config.max_accesses)?;
    if let Some(a) = accesses.iter().find(|a| a.dims() > config.max_buffer_dims) {
        capacity(stmt, "buffer dimensions", a.dims(), config.max_buffer_dims)?;
    }
    let items: Vec<ExprItem<'_>> = stmt
        .stmt
        .expr
        .post_order()
        .into_iter()
        .filter(|i| !matches!(i, ExprItem::Read(_)))
        .collect();
    capacity(stmt, "operation rows", items.len(), config.max_ops)?;
    let seq = seq.restricted_to(depth);
    capacity(stmt, "transformations", seq.len(), config.max_xforms)?;

    let layout = config.layout();
    let mut v = vec![config.pad_value; layout.total()];

    // domain
    for (l, lp) in stmt.loops.iter().enumerate() {
        let at = layout.domain.start + l * DOMAIN_FIELDS;
        v[at] = lp.lo as f64 / config.bound_scale;
        v[at + 1] = lp.hi as f64 / config.bound_scale;
        v[at + 2] = (lp.trip_count() as f64).log2() / config.log_trip_scale;
        v[at + 3] = 1.0;
    }

    // accesses
    let block = config.access_block();
    for (i, a) in accesses.iter().enumerate() {
        let base = layout.access.start + i * block;
        for (r, row) in a.matrix.iter().enumerate() {
            let at = base + r * (config.max_depth + 1);
            for (c, &x) in row.iter().enumerate() {
                v[at + c] = x as f64 / config.matrix_scale;
            }
        }
    }
    v[layout.access.end - 1] = accesses.len() as f64 / config.max_accesses as f64;

    // operations
    for (r, item) in items.iter().enumerate() {
        let col = match item {
            ExprItem::Op(op) => op.index(),
            _ => CONST_LEAF,
        };
        v[layout.ops.start + r * config.op_kinds + col] = 1.0;
    }

    // schedule matrix and transformation rows
    let sched = compose_schedule(&seq, depth)?;
    for (r, row) in sched.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            v[layout.sched.start + r * config.max_depth + c] = x as f64 / config.matrix_scale;
        }
    }
    let rows_at = layout.sched.start + config.max_depth * config.max_depth;
    let lvl = |l: usize| l as f64 / config.max_depth as f64;
    for (i, t) in seq.iter().enumerate() {
        let at = rows_at + i * config.xform_row();
        v[at + t.kind_index()] = 1.0;
        // sizes and factors of tiling and unrolling live in the tags
        let params = match *t {
            Transformation::Interchange { a, b } => [lvl(a), lvl(b)],
            Transformation::Reversal { level } => [lvl(level), 0.0],
            Transformation::Skewing { a, fb, .. } => [lvl(a), fb as f64 / config.skew_scale],
            Transformation::Parallelize { level } => [lvl(level), 0.0],
            Transformation::Tile { a, b, .. } => [lvl(a), lvl(b)],
            Transformation::Unroll { level, .. } => [lvl(level), 0.0],
        };
        v[at + Transformation::KINDS..at + Transformation::KINDS + XFORM_PARAMS].copy_from_slice(&params);
    }

    // tags
    let tags = layout.tags.start;
    if let Some(level) = seq.find_parallel() {
        v[tags + level] = 1.0;
    }
    let tile_at = tags + config.max_depth;
    if let Some((a, _, sa, sb)) = seq.find_tile() {
        v[tile_at] = 1.0;
        v[tile_at + 1] = lvl(a);
        v[tile_at + 2] = f64::from(sa).log2() / config.log_tile_scale;
        v[tile_at + 3] = f64::from(sb).log2() / config.log_tile_scale;
    }
    if let Some((_, factor)) = seq.find_unroll() {
        v[tile_at + 4] = 1.0;
        v[tile_at + 5] = f64::from(factor).log2() / config.log_unroll_scale;
    }
    Ok(ComputationVector(v))
}

/// Loop descriptor fed alongside child embeddings:
/// `(log2 trip / 10, level / MAX_DEPTH)`.
pub fn loop_descriptor(trip: i64, level: usize) -> [f64; 2] {
    [(trip as f64).log2() / 10.0, level as f64 / MAX_DEPTH as f64]
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Loop {
        descriptor: [f64; 2],
        children: Vec<TreeNode>,
    },
    Leaf {
        statement: String,
        vector: ComputationVector,
    },
}

impl TreeNode {
    pub fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Loop { children, .. } => children.iter().map(|c| c.leaf_count()).sum(),
            TreeNode::Leaf { .. } => 1,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            TreeNode::Loop { children, .. } => 1 + children.iter().map(|c| c.height()).max().unwrap_or(0),
            TreeNode::Leaf { .. } => 0,
        }
    }
}

/// Root loops of a program under an implicit virtual root.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramTree {
    pub roots: Vec<TreeNode>,
}

impl ProgramTree {
    pub fn leaf_count(&self) -> usize {
        self.roots.iter().map(|r| r.leaf_count()).sum()
    }

    /// Leaf vectors in program order.
    pub fn leaves(&self) -> Vec<&ComputationVector> {
        fn walk<'a>(n: &'a TreeNode, out: &mut Vec<&'a ComputationVector>) {
            match n {
                TreeNode::Loop { children, .. } => children.iter().for_each(|c| walk(c, out)),
                TreeNode::Leaf { vector, .. } => out.push(vector),
            }
        }
        let mut out = Vec::new();
        self.roots.iter().for_each(|r| walk(r, &mut out));
        out
    }
}

pub fn featurize_program(
    program: &Program,
    seq: &TransformationSequence,
    config: &FeatureConfig,
) -> Result<ProgramTree, FeatureError> {
    let stmts = program.statements();
    let mut next = stmts.iter();
    fn build(
        node: &LoopNode,
        level: usize,
        next: &mut std::slice::Iter<'_, StatementRef<'_>>,
        seq: &TransformationSequence,
        config: &FeatureConfig,
    ) -> Result<TreeNode, FeatureError> {
        let mut children = Vec::with_capacity(node.body.len());
        for child in &node.body {
            children.push(match child {
                Node::Loop(l) => build(l, level + 1, next, seq, config)?,
                Node::Stmt(_) => {
                    // statements() yields leaves in the same walk order
                    let s = next.next().expect("statement walk in sync");
                    TreeNode::Leaf {
                        statement: s.stmt.id.clone(),
                        vector: featurize_statement(s, seq, config)?,
                    }
                }
            });
        }
        Ok(TreeNode::Loop {
            descriptor: loop_descriptor(node.trip_count(), level),
            children,
        })
    }
    let roots = program
        .loops
        .iter()
        .map(|l| build(l, 0, &mut next, seq, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProgramTree { roots })
}

/// One line of a vector dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub program_id: String,
    pub statement_id: String,
    pub sequence: TransformationSequence,
    pub vector: ComputationVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VectorHeader {
    config: FeatureConfig,
    total_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorDataset {
    pub config: FeatureConfig,
    pub records: Vec<VectorRecord>,
}

impl VectorDataset {
    pub fn total_dim(&self) -> usize {
        self.config.total_dim()
    }

    /// Header line with the config, then one record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        let header = VectorHeader {
            config: self.config.clone(),
            total_dim: self.total_dim(),
        };
        serde_json::to_writer(&mut w, &serde_json::json!({ "header": header }))?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, FeatureError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| FeatureError::Dataset("empty file, missing header".into()))??;
        let mut head: serde_json::Value = serde_json::from_str(&first)?;
        let header: VectorHeader = serde_json::from_value(head["header"].take())
            .map_err(|e| FeatureError::Dataset(format!("bad header: {e}")))?;
        let dim = header.config.total_dim();
        if header.total_dim != dim {
            return Err(FeatureError::Dataset(format!(
                "header total_dim {} does not match its config ({dim})",
                header.total_dim
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorRecord = serde_json::from_str(&line)?;
            if rec.vector.len() != dim {
                return Err(FeatureError::Dataset(format!(
                    "record {} has {} entries, total_dim is {dim}",
                    i + 1,
                    rec.vector.len()
                )));
            }
            records.push(rec);
        }
        Ok(Self {
            config: header.config,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_ir::{access_matrix, Access, BinOp, BufferDecl, Expr, IndexExpr, Statement};
    use crate::transform::Transformation::*;

    fn stmt(id: &str, write: Vec<Vec<i64>>, expr: Expr) -> Statement {
        Statement::new(id, Access::new("A", write), expr)
    }

    fn golden_program() -> Program {
        use IndexExpr::*;
        let m = access_matrix(&[Iter(0), IndexExpr::add(Iter(0), Iter(1)), IndexExpr::sub(Iter(1), Const(2))], 2).unwrap();
        let s = stmt(
            "S0",
            vec![vec![1, 0, 0]],
            Expr::bin(BinOp::Add, Expr::read("B", m), Expr::Const(1.0)),
        );
        Program {
            id: "p".into(),
            buffers: vec![
                BufferDecl { name: "A".into(), dims: vec![64] },
                BufferDecl { name: "B".into(), dims: vec![64, 128, 64] },
            ],
            loops: vec![LoopNode::new(
                "i0",
                0,
                64,
                vec![Node::Loop(LoopNode::new("i1", 0, 64, vec![Node::Stmt(s)]))],
            )],
        }
    }

    #[test]
    fn default_dims() {
        assert_eq!(total_dim(&FeatureConfig::default()), 16 + 121 + 112 + 48 + 10);
        assert_eq!(total_dim(&FeatureConfig::default()), 307);
        let one = FeatureConfig { max_accesses: 1, ..Default::default() };
        assert_eq!(total_dim(&one), 207);
    }

    #[test]
    fn golden_matrix_lands_in_read_block() {
        let cfg = FeatureConfig::default();
        let p = golden_program();
        let v = featurize_statement(&p.statement("S0").unwrap(), &TransformationSequence::empty(), &cfg).unwrap();
        let layout = cfg.layout();
        let block = layout.access.start + cfg.access_block(); // read 0 follows the write
        let width = cfg.max_depth + 1;
        let top_left: Vec<Vec<f64>> = (0..3)
            .map(|r| (0..3).map(|c| v.0[block + r * width + c] * cfg.matrix_scale).collect())
            .collect();
        assert_eq!(top_left, vec![vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 1.0, -2.0]]);
        // row 3 is padding
        assert!(v.0[block + 3 * width..block + 4 * width].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_sequence_gives_identity_and_no_tags() {
        let cfg = FeatureConfig::default();
        let p = golden_program();
        let v = featurize_statement(&p.statement("S0").unwrap(), &TransformationSequence::empty(), &cfg).unwrap();
        let l = cfg.layout();
        let m = &v.0[l.sched.start..l.sched.start + 16];
        let expect = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let scaled: Vec<f64> = m.iter().map(|x| x * cfg.matrix_scale).collect();
        assert_eq!(scaled, expect);
        assert!(v.0[l.tags.clone()].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn capacity_error_on_seven_accesses() {
        let cfg = FeatureConfig::default();
        let mut e = Expr::read("B", vec![vec![0, 0]]);
        for _ in 0..6 {
            e = Expr::bin(BinOp::Add, e, Expr::read("B", vec![vec![0, 0]]));
        }
        let s = stmt("S", vec![vec![1, 0]], e);
        let p = Program {
            id: "p".into(),
            buffers: vec![
                BufferDecl { name: "A".into(), dims: vec![8] },
                BufferDecl { name: "B".into(), dims: vec![8] },
            ],
            loops: vec![LoopNode::new("i0", 0, 8, vec![Node::Stmt(s)])],
        };
        let err = featurize_statement(&p.statement("S").unwrap(), &TransformationSequence::empty(), &cfg).unwrap_err();
        assert!(matches!(err, FeatureError::Capacity { ref statement, .. } if statement == "S"), "{err}");
    }

    #[test]
    fn ops_rows_are_post_order_one_hot() {
        let cfg = FeatureConfig::default();
        let p = golden_program();
        let v = featurize_statement(&p.statement("S0").unwrap(), &TransformationSequence::empty(), &cfg).unwrap();
        let l = cfg.layout();
        // B[..] + 1.0 -> rows: CONST, ADD
        let row = |r: usize| v.0[l.ops.start + r * 7..l.ops.start + (r + 1) * 7].to_vec();
        assert_eq!(row(0), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(row(1), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unroll_factor_only_touches_tags() {
        let cfg = FeatureConfig::default();
        let p = golden_program();
        let s = p.statement("S0").unwrap();
        let a = featurize_statement(&s, &vec![Unroll { level: 1, factor: 2 }].into(), &cfg).unwrap();
        let b = featurize_statement(&s, &vec![Unroll { level: 1, factor: 16 }].into(), &cfg).unwrap();
        let tags = cfg.layout().tags;
        for i in 0..a.len() {
            if !tags.contains(&i) {
                assert_eq!(a.0[i], b.0[i], "entry {i}");
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn tree_shapes() {
        let cfg = FeatureConfig::default();
        let t = featurize_program(&golden_program(), &TransformationSequence::empty(), &cfg).unwrap();
        assert_eq!(t.roots.len(), 1);
        assert_eq!(t.roots[0].height(), 2);
        assert_eq!(t.leaf_count(), 1);
    }

    #[test]
    fn dataset_round_trip_and_dim_check() {
        let cfg = FeatureConfig::default();
        let p = golden_program();
        let v = featurize_statement(&p.statement("S0").unwrap(), &TransformationSequence::empty(), &cfg).unwrap();
        let ds = VectorDataset {
            config: cfg.clone(),
            records: vec![VectorRecord {
                program_id: "p".into(),
                statement_id: "S0".into(),
                sequence: vec![Reversal { level: 0 }].into(),
                vector: v,
            }],
        };
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = VectorDataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);

        let text = String::from_utf8(buf).unwrap().replace("\"total_dim\":307", "\"total_dim\":300");
        assert!(VectorDataset::read_jsonl(text.as_bytes()).is_err());
    }
}
