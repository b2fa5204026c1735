//! Random program generation, transformation sampling and the analytic
//! cost oracle that labels speedups.
//!
//! Every program is drawn from its own ChaCha stream keyed by
//! `(seed, stream)`, so a dataset can be regenerated item by item.
//! Labeled programs use streams `0..n`; pre-training programs use streams
//! from [`PRETRAIN_STREAM_BASE`] so the two never overlap.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{featurize_statement, FeatureConfig, FeatureError, VectorDataset, VectorRecord};
use crate::loop_ir::{Access, BinOp, BufferDecl, Expr, LoopNode, Node, Program, Statement, StatementRef, MAX_DEPTH};
use crate::transform::{
    applicable_program, effective_loop_structure, inverse_schedule, transformed_access, Transformation,
    TransformationSequence, MAX_XFORMS, SKEW_FACTORS, TILE_SIZES, UNROLL_FACTORS,
};

pub const PRETRAIN_STREAM_BASE: u64 = 1 << 40;
const SPLIT_STREAM: u64 = 1 << 41;
const BUFFER_EXTENT: i64 = 512;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sequence {sequence} is not applicable to {program}: {reasons}")]
    Inapplicable {
        program: String,
        sequence: String,
        reasons: String,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_programs: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    pub min_statements: usize,
    pub max_statements: usize,
    pub trip_counts: Vec<i64>,
    pub min_sequences: usize,
    pub max_sequences: usize,
    /// Reads per statement, at least one.
    pub max_reads: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_programs: 100,
            min_depth: 1,
            max_depth: MAX_DEPTH,
            min_statements: 1,
            max_statements: 3,
            trip_counts: vec![8, 16, 32, 64, 128],
            min_sequences: 1,
            max_sequences: 32,
            max_reads: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Config(m.to_string()));
        if !(1 <= self.min_depth && self.min_depth <= self.max_depth && self.max_depth <= MAX_DEPTH) {
            return err("depth range must lie in 1..=4");
        }
        if !(1 <= self.min_statements && self.min_statements <= self.max_statements) {
            return err("statement range must be nonempty and start at 1 or more");
        }
        if self.trip_counts.is_empty() || self.trip_counts.iter().any(|&t| !(2..=BUFFER_EXTENT).contains(&t)) {
            return err("trip counts must be nonempty and within 2..=512");
        }
        if !(1 <= self.min_sequences && self.min_sequences <= self.max_sequences) {
            return err("sequence range must be nonempty and start at 1 or more");
        }
        if !(1..=5).contains(&self.max_reads) {
            return err("max_reads must be in 1..=5");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub cores: u32,
    pub parallel_efficiency: f64,
    pub stride_cap: f64,
    pub tile_locality: f64,
    pub unroll_cap: f64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            cores: 8,
            parallel_efficiency: 0.9,
            stride_cap: 16.0,
            tile_locality: 0.8,
            unroll_cap: 0.7,
        }
    }
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = self.cores >= 1
            && self.parallel_efficiency > 0.0
            && self.parallel_efficiency <= 1.0
            && self.stride_cap >= 0.0
            && self.tile_locality > 0.0
            && self.tile_locality <= 1.0
            && self.unroll_cap > 0.0
            && self.unroll_cap <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(DataError::Config(format!("machine config out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub program_id: String,
    pub sequence: TransformationSequence,
    pub speedup: f64,
}

pub fn program_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn pick<T: Copy, R: Rng>(rng: &mut R, items: &[T]) -> T {
    *items.choose(rng).expect("nonempty choice")
}

struct BufferPool {
    decls: Vec<BufferDecl>,
}

impl BufferPool {
    fn add(&mut self, name: String, dims: usize) {
        self.decls.push(BufferDecl {
            name,
            dims: vec![BUFFER_EXTENT; dims],
        });
    }
}

fn gen_write<R: Rng>(rng: &mut R, depth: usize) -> Vec<Vec<i64>> {
    let k = rng.gen_range(1..=depth.min(3));
    let mut iters: Vec<usize> = (0..depth).collect();
    iters.shuffle(rng);
    // mostly keep the natural nesting order, sometimes write transposed
    let mut chosen: Vec<usize> = iters[..k].to_vec();
    if rng.gen_bool(0.7) {
        chosen.sort_unstable();
    }
    chosen
        .iter()
        .map(|&l| {
            let mut row = vec![0; depth + 1];
            row[l] = 1;
            row
        })
        .collect()
}

fn gen_read<R: Rng>(rng: &mut R, dims: usize, depth: usize) -> Vec<Vec<i64>> {
    (0..dims)
        .map(|_| {
            let mut row = vec![0; depth + 1];
            if rng.gen_bool(0.85) {
                let l = rng.gen_range(0..depth);
                row[l] = pick(rng, &[1, 1, 1, 1, 2, 4, 8, 16]);
                if depth > 1 && rng.gen_bool(0.15) {
                    let m = rng.gen_range(0..depth);
                    row[m] += 1;
                }
            }
            row[depth] = pick(rng, &[-1, 0, 0, 0, 0, 1, 2]);
            row
        })
        .collect()
}

fn gen_expr<R: Rng>(rng: &mut R, leaves: Vec<Expr>) -> Expr {
    let mut items = leaves;
    while items.len() > 1 {
        let i = rng.gen_range(0..items.len() - 1);
        let rhs = items.remove(i + 1);
        let lhs = items.remove(i);
        let mut op = pick(
            rng,
            &[BinOp::Add, BinOp::Add, BinOp::Mul, BinOp::Mul, BinOp::Sub, BinOp::Div, BinOp::Min, BinOp::Max],
        );
        let bad_div = match &rhs {
            Expr::Binary { .. } => true,
            Expr::Const(c) => *c == 0.0,
            Expr::Read(_) => false,
        };
        if op == BinOp::Div && bad_div {
            op = BinOp::Add;
        }
        items.insert(i, Expr::bin(op, lhs, rhs));
    }
    items.pop().expect("at least one leaf")
}

fn gen_statement<R: Rng>(rng: &mut R, id: usize, depth: usize, pool: &mut BufferPool, cfg: &GenConfig) -> Statement {
    let write = gen_write(rng, depth);
    let n_reads = rng.gen_range(1..=cfg.max_reads);
    let mut leaves = Vec::new();
    for _ in 0..n_reads {
        let b = pool.decls.choose(rng).expect("pool has inputs").clone();
        leaves.push(Expr::read(&b.name, gen_read(rng, b.dims.len(), depth)));
    }
    let n_consts = rng.gen_range(0..=2).max(usize::from(n_reads == 1));
    for _ in 0..n_consts {
        leaves.push(Expr::Const(pick(rng, &[0.5, 1.0, 2.0, 3.0])));
    }
    leaves.shuffle(rng);
    let expr = gen_expr(rng, leaves);
    let name = format!("out{id}");
    pool.add(name.clone(), write.len());
    Statement::new(&format!("S{id}"), Access::new(&name, write), expr)
}

/// A chain of `depth` loops with statements placed at chosen levels.
/// `placements` holds `(statement depth, before inner loop)`.
fn gen_nest<R: Rng>(
    rng: &mut R,
    depth: usize,
    placements: &[(usize, bool)],
    first_id: usize,
    pool: &mut BufferPool,
    cfg: &GenConfig,
) -> LoopNode {
    let trips: Vec<i64> = (0..depth).map(|_| pick(rng, &cfg.trip_counts)).collect();
    // bodies[l] are the statements directly under loop l, split around loop l+1
    let mut before: Vec<Vec<Node>> = vec![Vec::new(); depth];
    let mut after: Vec<Vec<Node>> = vec![Vec::new(); depth];
    for (k, &(d, pre)) in placements.iter().enumerate() {
        let s = gen_statement(rng, first_id + k, d, pool, cfg);
        if pre || d == depth {
            before[d - 1].push(Node::Stmt(s));
        } else {
            after[d - 1].push(Node::Stmt(s));
        }
    }
    let mut inner: Option<LoopNode> = None;
    for l in (0..depth).rev() {
        let mut body = std::mem::take(&mut before[l]);
        if let Some(child) = inner.take() {
            body.push(Node::Loop(child));
        }
        body.append(&mut after[l]);
        inner = Some(LoopNode::new(&format!("i{l}"), 0, trips[l], body));
    }
    inner.expect("depth >= 1")
}

pub fn gen_program<R: Rng>(rng: &mut R, cfg: &GenConfig, id: &str) -> Program {
    let depth = rng.gen_range(cfg.min_depth..=cfg.max_depth);
    let n_stmts = rng.gen_range(cfg.min_statements..=cfg.max_statements);
    let mut pool = BufferPool { decls: Vec::new() };
    for i in 0..rng.gen_range(2..=4) {
        pool.add(format!("in{i}"), rng.gen_range(1..=3));
    }
    let second_root = n_stmts >= 2 && rng.gen_bool(0.2);
    let in_first = if second_root { n_stmts - 1 } else { n_stmts };
    // the first statement sits at the full depth so every loop has a body
    let mut placements = vec![(depth, true)];
    for _ in 1..in_first {
        placements.push((rng.gen_range(1..=depth), rng.gen_bool(0.5)));
    }
    let mut loops = vec![gen_nest(rng, depth, &placements, 0, &mut pool, cfg)];
    if second_root {
        let d2 = rng.gen_range(cfg.min_depth..=cfg.max_depth);
        loops.push(gen_nest(rng, d2, &[(d2, true)], in_first, &mut pool, cfg));
    }
    Program {
        id: id.to_string(),
        buffers: pool.decls,
        loops,
    }
}

fn random_transformation<R: Rng>(rng: &mut R, depth: usize) -> Transformation {
    let mut kinds = vec![1, 3, 5];
    if depth > 1 {
        kinds.extend([0, 2, 4]);
    }
    match pick(rng, &kinds) {
        0 => {
            let a = rng.gen_range(0..depth - 1);
            Transformation::Interchange {
                a,
                b: rng.gen_range(a + 1..depth),
            }
        }
        1 => Transformation::Reversal {
            level: rng.gen_range(0..depth),
        },
        2 => {
            let a = rng.gen_range(0..depth);
            let b = (a + rng.gen_range(1..depth)) % depth;
            Transformation::Skewing {
                a,
                b,
                fa: 1,
                fb: rng.gen_range(SKEW_FACTORS),
            }
        }
        3 => Transformation::Parallelize {
            level: rng.gen_range(0..depth),
        },
        4 => {
            let a = rng.gen_range(0..depth - 1);
            Transformation::Tile {
                a,
                b: a + 1,
                size_a: pick(rng, &TILE_SIZES),
                size_b: pick(rng, &TILE_SIZES),
            }
        }
        _ => Transformation::Unroll {
            level: rng.gen_range(0..depth),
            factor: pick(rng, &UNROLL_FACTORS),
        },
    }
}

/// Distinct applicable sequences, always starting with the empty one.
pub fn sample_sequences<R: Rng>(program: &Program, rng: &mut R, cfg: &GenConfig) -> Vec<TransformationSequence> {
    let depth = program.max_depth();
    let target = rng.gen_range(cfg.min_sequences..=cfg.max_sequences);
    let mut seen = HashSet::new();
    let mut out = vec![TransformationSequence::empty()];
    seen.insert(TransformationSequence::empty());
    let mut attempts = 0;
    while out.len() < target && attempts < 40 * target {
        attempts += 1;
        let len = rng.gen_range(1..=MAX_XFORMS);
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            seq.push(random_transformation(rng, depth));
        }
        let seq = TransformationSequence(seq);
        if seen.contains(&seq) || !applicable_program(&seq, program).is_empty() {
            continue;
        }
        seen.insert(seq.clone());
        out.push(seq);
    }
    out
}

/// The factors of one statement's cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTerms {
    pub work: f64,
    pub mem: f64,
    pub locality: f64,
    pub unroll_gain: f64,
    pub parallel_gain: f64,
}

impl CostTerms {
    pub fn cost(&self) -> f64 {
        self.work * self.mem * self.locality * self.unroll_gain * self.parallel_gain
    }
}

/// Cost factors of one statement; `seq` is the program-wide sequence,
/// assumed applicable.
pub fn statement_terms(stmt: &StatementRef<'_>, seq: &TransformationSequence, m: &MachineConfig) -> CostTerms {
    let depth = stmt.depth();
    let seq = seq.restricted_to(depth);
    let loops = effective_loop_structure(&stmt.trip_counts(), &seq).expect("restricted sequence fits");
    let work = stmt.stmt.op_count() as f64 * loops.iter().map(|l| l.instances() as f64).product::<f64>();
    let inv = inverse_schedule(&seq, depth).expect("restricted sequence fits");
    let transformed: Vec<Vec<Vec<i64>>> = stmt
        .stmt
        .accesses()
        .iter()
        .map(|a| transformed_access(a, &inv))
        .collect();
    let inner = depth - 1;
    let penalties: Vec<f64> = transformed
        .iter()
        .map(|t| {
            let stride = t.last().map_or(0, |row| row[inner]).unsigned_abs() as f64;
            if stride == 0.0 {
                1.0
            } else {
                1.0 + 0.25 * stride.min(m.stride_cap)
            }
        })
        .collect();
    let mem = penalties.iter().sum::<f64>() / penalties.len() as f64;
    let locality = match seq.find_tile() {
        Some((a, b, ..)) => {
            let outer: Vec<usize> = [a, b].into_iter().filter(|&l| l != inner).collect();
            let touches = transformed
                .iter()
                .any(|t| t.iter().any(|row| outer.iter().any(|&l| row[l] != 0)));
            if touches {
                m.tile_locality
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let unroll_gain = match seq.find_unroll() {
        Some((_, f)) => m.unroll_cap.max(1.0 - 0.05 * f64::from(f).log2()),
        None => 1.0,
    };
    let parallel_gain = match loops.iter().find(|l| l.parallel) {
        Some(l) => 1.0 / ((m.cores as f64).min(l.trip as f64) * m.parallel_efficiency),
        None => 1.0,
    };
    CostTerms {
        work,
        mem,
        locality,
        unroll_gain,
        parallel_gain,
    }
}

pub fn oracle_cost(program: &Program, seq: &TransformationSequence, m: &MachineConfig) -> Result<f64, DataError> {
    let v = applicable_program(seq, program);
    if !v.is_empty() {
        return Err(DataError::Inapplicable {
            program: program.id.clone(),
            sequence: seq.to_string(),
            reasons: v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        });
    }
    Ok(program
        .statements()
        .iter()
        .map(|s| statement_terms(s, seq, m).cost())
        .sum())
}

pub fn speedup(program: &Program, seq: &TransformationSequence, m: &MachineConfig) -> Result<f64, DataError> {
    let base = oracle_cost(program, &TransformationSequence::empty(), m)?;
    Ok(base / oracle_cost(program, seq, m)?)
}

/// `floor(f * n)` items, nested across fractions for a fixed seed.
pub fn subsample_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    let n = ((fraction.clamp(0.0, 1.0) * items.len() as f64) + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut program_rng(seed, SPLIT_STREAM + 1));
    let mut keep = idx[..n].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub programs: Vec<Program>,
    pub train: Vec<LabeledSample>,
    pub valid: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl LabeledDataset {
    pub fn program(&self, id: &str) -> Option<&Program> {
        self.programs.iter().find(|p| p.id == id)
    }
}

/// Program counts of a 5:1:1 split of `n`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 5 + 3) / 7;
    let valid = (n - train) / 2;
    (train, valid, n - train - valid)
}

pub fn labeled_program_id(index: usize) -> String {
    format!("p{index:06}")
}

pub fn pretrain_program_id(index: usize) -> String {
    format!("u{index:06}")
}

pub fn build_labeled_dataset(cfg: &GenConfig, m: &MachineConfig) -> Result<LabeledDataset, DataError> {
    cfg.validate()?;
    m.validate()?;
    let mut programs = Vec::with_capacity(cfg.n_programs);
    let mut samples = Vec::with_capacity(cfg.n_programs);
    for i in 0..cfg.n_programs {
        let mut rng = program_rng(cfg.seed, i as u64);
        let p = gen_program(&mut rng, cfg, &labeled_program_id(i));
        let base = oracle_cost(&p, &TransformationSequence::empty(), m)?;
        let mut rows = Vec::new();
        for seq in sample_sequences(&p, &mut rng, cfg) {
            let speedup = base / oracle_cost(&p, &seq, m)?;
            rows.push(LabeledSample {
                program_id: p.id.clone(),
                sequence: seq,
                speedup,
            });
        }
        programs.push(p);
        samples.push(rows);
    }
    let mut order: Vec<usize> = (0..cfg.n_programs).collect();
    order.shuffle(&mut program_rng(cfg.seed, SPLIT_STREAM));
    let (n_train, n_valid, _) = split_sizes(cfg.n_programs);
    let mut part = |range: std::ops::Range<usize>| {
        let mut ids: Vec<usize> = order[range].to_vec();
        ids.sort_unstable();
        ids.into_iter()
            .flat_map(|i| std::mem::take(&mut samples[i]))
            .collect::<Vec<_>>()
    };
    let train = part(0..n_train);
    let valid = part(n_train..n_train + n_valid);
    let test = part(n_train + n_valid..cfg.n_programs);
    Ok(LabeledDataset {
        programs,
        train,
        valid,
        test,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainDataset {
    pub vectors: VectorDataset,
    pub skipped: usize,
}

/// Unlabeled vectors for every (statement, sequence) pair. Never calls
/// the oracle.
pub fn build_pretrain_dataset(cfg: &GenConfig, fcfg: &FeatureConfig) -> Result<PretrainDataset, DataError> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for i in 0..cfg.n_programs {
        let mut rng = program_rng(cfg.seed, PRETRAIN_STREAM_BASE + i as u64);
        let p = gen_program(&mut rng, cfg, &pretrain_program_id(i));
        let seqs = sample_sequences(&p, &mut rng, cfg);
        for s in p.statements() {
            for seq in &seqs {
                match featurize_statement(&s, seq, fcfg) {
                    Ok(v) => records.push(VectorRecord {
                        program_id: p.id.clone(),
                        statement_id: s.stmt.id.clone(),
                        sequence: seq.clone(),
                        vector: v,
                    }),
                    Err(FeatureError::Capacity { .. } | FeatureError::TooDeep { .. }) => skipped += 1,
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    Ok(PretrainDataset {
        vectors: VectorDataset {
            config: fcfg.clone(),
            records,
        },
        skipped,
    })
}
