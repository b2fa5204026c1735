//! Miniature loop-nest programs with affine array accesses.
//!
//! Loops have constant bounds, so each statement's iteration domain is a
//! box. Accesses are stored as integer access matrices with one row per
//! buffer dimension and one column per enclosing iterator plus a trailing
//! constant column.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DEPTH: usize = 4;
pub const MAX_OPS: usize = 16;
pub const MAX_BUFFER_DIMS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum IrError {
    #[error("unknown statement `{0}`")]
    UnknownStatement(String),
    #[error("non-affine index expression: {0}")]
    NonAffine(String),
    #[error("iterator level {level} out of range for depth {depth}")]
    IterOutOfRange { level: usize, depth: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub id: String,
    pub buffers: Vec<BufferDecl>,
    pub loops: Vec<LoopNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferDecl {
    pub name: String,
    pub dims: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopNode {
    pub iter: String,
    pub lo: i64,
    /// Exclusive.
    pub hi: i64,
    pub body: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Loop(LoopNode),
    Stmt(Statement),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub write: Access,
    pub expr: Expr,
}

/// An affine access `buffer[M * (i_0, ..., i_{n-1}, 1)^T]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Access {
    pub buffer: String,
    pub matrix: Vec<Vec<i64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl BinOp {
    pub const ALL: [BinOp; 6] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Min,
        BinOp::Max,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Read(Access),
    Const(f64),
}

/// One node of a post-order walk over an expression tree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExprItem<'a> {
    Op(BinOp),
    Read(&'a Access),
    Const(f64),
}

impl Expr {
    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn read(buffer: &str, matrix: Vec<Vec<i64>>) -> Self {
        Expr::Read(Access::new(buffer, matrix))
    }

    pub fn post_order(&self) -> Vec<ExprItem<'_>> {
        fn walk<'a>(e: &'a Expr, out: &mut Vec<ExprItem<'a>>) {
            match e {
                Expr::Binary { op, lhs, rhs } => {
                    walk(lhs, out);
                    walk(rhs, out);
                    out.push(ExprItem::Op(*op));
                }
                Expr::Read(a) => out.push(ExprItem::Read(a)),
                Expr::Const(c) => out.push(ExprItem::Const(*c)),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    pub fn op_count(&self) -> usize {
        match self {
            Expr::Binary { lhs, rhs, .. } => 1 + lhs.op_count() + rhs.op_count(),
            _ => 0,
        }
    }

    /// Read accesses in left-to-right order.
    pub fn reads(&self) -> Vec<&Access> {
        self.post_order()
            .into_iter()
            .filter_map(|i| match i {
                ExprItem::Read(a) => Some(a),
                _ => None,
            })
            .collect()
    }
}

impl Access {
    pub fn new(buffer: &str, matrix: Vec<Vec<i64>>) -> Self {
        Self {
            buffer: buffer.to_string(),
            matrix,
        }
    }

    pub fn dims(&self) -> usize {
        self.matrix.len()
    }

    /// Coefficient of iterator `level` in row `row`.
    pub fn coeff(&self, row: usize, level: usize) -> i64 {
        self.matrix[row][level]
    }
}

impl Statement {
    pub fn new(id: &str, write: Access, expr: Expr) -> Self {
        Self {
            id: id.to_string(),
            write,
            expr,
        }
    }

    /// Write access first, then reads in expression order.
    pub fn accesses(&self) -> Vec<&Access> {
        let mut out = vec![&self.write];
        out.extend(self.expr.reads());
        out
    }

    pub fn op_count(&self) -> usize {
        self.expr.op_count()
    }
}

impl LoopNode {
    pub fn new(iter: &str, lo: i64, hi: i64, body: Vec<Node>) -> Self {
        Self {
            iter: iter.to_string(),
            lo,
            hi,
            body,
        }
    }

    pub fn trip_count(&self) -> i64 {
        self.hi - self.lo
    }
}

/// A statement together with its enclosing loops, outermost first.
#[derive(Clone, Debug)]
pub struct StatementRef<'a> {
    pub stmt: &'a Statement,
    pub loops: Vec<&'a LoopNode>,
}

impl StatementRef<'_> {
    pub fn depth(&self) -> usize {
        self.loops.len()
    }

    pub fn trip_counts(&self) -> Vec<i64> {
        self.loops.iter().map(|l| l.trip_count()).collect()
    }

    pub fn domain(&self) -> Vec<(i64, i64)> {
        self.loops.iter().map(|l| (l.lo, l.hi)).collect()
    }
}

impl Program {
    /// Statements in program (source) order.
    pub fn statements(&self) -> Vec<StatementRef<'_>> {
        fn walk<'a>(node: &'a LoopNode, stack: &mut Vec<&'a LoopNode>, out: &mut Vec<StatementRef<'a>>) {
            stack.push(node);
            for child in &node.body {
                match child {
                    Node::Loop(l) => walk(l, stack, out),
                    Node::Stmt(s) => out.push(StatementRef {
                        stmt: s,
                        loops: stack.clone(),
                    }),
                }
            }
            stack.pop();
        }
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for l in &self.loops {
            walk(l, &mut stack, &mut out);
        }
        out
    }

    pub fn statement(&self, id: &str) -> Result<StatementRef<'_>, IrError> {
        self.statements()
            .into_iter()
            .find(|s| s.stmt.id == id)
            .ok_or_else(|| IrError::UnknownStatement(id.to_string()))
    }

    pub fn max_depth(&self) -> usize {
        self.statements().iter().map(|s| s.depth()).max().unwrap_or(0)
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferDecl> {
        self.buffers.iter().find(|b| b.name == name)
    }
}

pub fn loop_depth(program: &Program, statement_id: &str) -> Result<usize, IrError> {
    program.statement(statement_id).map(|s| s.depth())
}

pub fn iteration_domain(program: &Program, statement_id: &str) -> Result<Vec<(i64, i64)>, IrError> {
    program.statement(statement_id).map(|s| s.domain())
}

/// An index expression over loop iterators, identified by nesting level.
#[derive(Clone, Debug, PartialEq)]
pub enum IndexExpr {
    Iter(usize),
    Const(i64),
    Add(Box<IndexExpr>, Box<IndexExpr>),
    Sub(Box<IndexExpr>, Box<IndexExpr>),
    Mul(Box<IndexExpr>, Box<IndexExpr>),
    Neg(Box<IndexExpr>),
}

impl IndexExpr {
    pub fn add(a: IndexExpr, b: IndexExpr) -> Self {
        IndexExpr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: IndexExpr, b: IndexExpr) -> Self {
        IndexExpr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: IndexExpr, b: IndexExpr) -> Self {
        IndexExpr::Mul(Box::new(a), Box::new(b))
    }

    /// `(coefficients, constant)` of the affine form, or an error when the
    /// expression multiplies two iterator-dependent terms.
    pub fn affine(&self, depth: usize) -> Result<(Vec<i64>, i64), IrError> {
        match self {
            IndexExpr::Iter(l) => {
                if *l >= depth {
                    return Err(IrError::IterOutOfRange { level: *l, depth });
                }
                let mut c = vec![0; depth];
                c[*l] = 1;
                Ok((c, 0))
            }
            IndexExpr::Const(k) => Ok((vec![0; depth], *k)),
            IndexExpr::Add(a, b) | IndexExpr::Sub(a, b) => {
                let sign = if matches!(self, IndexExpr::Add(..)) { 1 } else { -1 };
                let (ca, ka) = a.affine(depth)?;
                let (cb, kb) = b.affine(depth)?;
                let c = ca.iter().zip(&cb).map(|(x, y)| x + sign * y).collect();
                Ok((c, ka + sign * kb))
            }
            IndexExpr::Neg(a) => {
                let (c, k) = a.affine(depth)?;
                Ok((c.into_iter().map(|x| -x).collect(), -k))
            }
            IndexExpr::Mul(a, b) => {
                let (ca, ka) = a.affine(depth)?;
                let (cb, kb) = b.affine(depth)?;
                let a_const = ca.iter().all(|&x| x == 0);
                let b_const = cb.iter().all(|&x| x == 0);
                match (a_const, b_const) {
                    (true, _) => Ok((cb.iter().map(|x| x * ka).collect(), ka * kb)),
                    (_, true) => Ok((ca.iter().map(|x| x * kb).collect(), ka * kb)),
                    _ => Err(IrError::NonAffine(format!("{self:?}"))),
                }
            }
        }
    }
}

/// Builds the `k x (depth + 1)` access matrix of a list of index expressions.
pub fn access_matrix(indices: &[IndexExpr], depth: usize) -> Result<Vec<Vec<i64>>, IrError> {
    indices
        .iter()
        .map(|e| {
            let (mut row, k) = e.affine(depth)?;
            row.push(k);
            Ok(row)
        })
        .collect()
}

/// Canonical index expressions for an access matrix (inverse of
/// [`access_matrix`]).
pub fn index_exprs(matrix: &[Vec<i64>]) -> Vec<IndexExpr> {
    matrix
        .iter()
        .map(|row| {
            let (coeffs, k) = row.split_at(row.len() - 1);
            let mut e = IndexExpr::Const(k[0]);
            for (l, &c) in coeffs.iter().enumerate() {
                if c != 0 {
                    let term = IndexExpr::mul(IndexExpr::Const(c), IndexExpr::Iter(l));
                    e = IndexExpr::add(e, term);
                }
            }
            e
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

fn violation(location: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        location: location.into(),
        message: message.into(),
    }
}

/// Every invariant violation in `program`; empty means valid.
pub fn validate(program: &Program) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut buffer_dims: HashMap<&str, usize> = HashMap::new();
    for b in &program.buffers {
        let loc = format!("buffer {}", b.name);
        if buffer_dims.insert(&b.name, b.dims.len()).is_some() {
            out.push(violation(&loc, "duplicate buffer name"));
        }
        if b.dims.is_empty() || b.dims.len() > MAX_BUFFER_DIMS {
            out.push(violation(&loc, format!("has {} dimensions, allowed 1..={MAX_BUFFER_DIMS}", b.dims.len())));
        }
        if b.dims.iter().any(|&d| d <= 0) {
            out.push(violation(&loc, "extents must be positive"));
        }
    }
    if program.loops.is_empty() {
        out.push(violation(&program.id, "program has no loops"));
    }

    fn check_loops(node: &LoopNode, path: &mut Vec<String>, out: &mut Vec<Violation>) {
        let loc = format!("loop {}", node.iter);
        if path.contains(&node.iter) {
            out.push(violation(&loc, format!("duplicate iterator name `{}` on path", node.iter)));
        }
        if node.hi - node.lo < 2 {
            out.push(violation(&loc, format!("trip count {} < 2", node.hi - node.lo)));
        }
        if node.body.is_empty() {
            out.push(violation(&loc, "empty loop body"));
        }
        path.push(node.iter.clone());
        for child in &node.body {
            if let Node::Loop(l) = child {
                check_loops(l, path, out);
            }
        }
        path.pop();
    }
    for l in &program.loops {
        check_loops(l, &mut Vec::new(), &mut out);
    }

    let mut ids = HashSet::new();
    for s in program.statements() {
        let loc = format!("statement {}", s.stmt.id);
        if !ids.insert(&s.stmt.id) {
            out.push(violation(&loc, "duplicate statement id"));
        }
        let depth = s.depth();
        if depth == 0 || depth > MAX_DEPTH {
            out.push(violation(&loc, format!("depth {depth} outside 1..={MAX_DEPTH}")));
        }
        let ops = s.stmt.op_count();
        if ops == 0 || ops > MAX_OPS {
            out.push(violation(&loc, format!("{ops} operations, allowed 1..={MAX_OPS}")));
        }
        for (i, a) in s.stmt.accesses().into_iter().enumerate() {
            let aloc = format!("{loc} access {i} ({})", a.buffer);
            match buffer_dims.get(a.buffer.as_str()) {
                None => out.push(violation(&aloc, "undeclared buffer")),
                Some(&k) if k != a.dims() => out.push(violation(
                    &aloc,
                    format!("{} index rows for a {k}-dimensional buffer", a.dims()),
                )),
                _ => {}
            }
            if let Some(row) = a.matrix.iter().find(|r| r.len() != depth + 1) {
                out.push(violation(
                    &aloc,
                    format!("matrix has {} columns, expected {}", row.len(), depth + 1),
                ));
            }
        }
        check_divisors(&s.stmt.expr, &loc, &mut out);
    }
    out
}

fn check_divisors(e: &Expr, loc: &str, out: &mut Vec<Violation>) {
    if let Expr::Binary { op, lhs, rhs } = e {
        if *op == BinOp::Div {
            match rhs.as_ref() {
                Expr::Const(c) if *c == 0.0 => out.push(violation(loc, "division by constant zero")),
                Expr::Binary { .. } => out.push(violation(loc, "divisor must be an access or a constant")),
                _ => {}
            }
        }
        check_divisors(lhs, loc, out);
        check_divisors(rhs, loc, out);
    }
}
