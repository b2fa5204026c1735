//! Beam search over transformation sequences.
//!
//! The root is the empty sequence. Each level extends every beam member by
//! every applicable single transformation, scores the extensions and keeps
//! the best `beam_width`. Ties go to the lexicographically smaller
//! serialized sequence, so results do not depend on evaluation order.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tensornet::ParameterStore;

use crate::autoencoder::ModelError;
use crate::datagen::{speedup, DataError, MachineConfig};
use crate::loop_ir::{validate, Program};
use crate::perfmodel::{PerfModel, TreeSample};
use crate::transform::{applicable_program, candidates, TransformationSequence, MAX_XFORMS};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("program {id} is invalid: {message}")]
    InvalidProgram { id: String, message: String },
    #[error(transparent)]
    Oracle(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// `usize::MAX` keeps every candidate (exhaustive search).
    pub beam_width: usize,
    pub max_depth: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            max_depth: 4,
        }
    }
}

impl SearchConfig {
    pub fn exhaustive(max_depth: usize) -> Self {
        Self {
            beam_width: usize::MAX,
            max_depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(SearchError::Config("beam width must be at least 1".into()));
        }
        if self.max_depth == 0 || self.max_depth > MAX_XFORMS {
            return Err(SearchError::Config(format!("depth must lie in 1..={MAX_XFORMS}")));
        }
        Ok(())
    }
}

/// What scores a candidate. The model variant has no access to the
/// machine description, so a model-guided search never consults the oracle.
#[derive(Clone, Copy)]
pub enum Evaluator<'a> {
    Oracle(&'a MachineConfig),
    Model { model: &'a PerfModel, store: &'a ParameterStore },
}

impl Evaluator<'_> {
    pub fn score(&self, program: &Program, seqs: &[TransformationSequence]) -> Result<Vec<f64>> {
        match self {
            Evaluator::Oracle(m) => Ok(seqs.iter().map(|s| speedup(program, s, m)).collect::<std::result::Result<_, _>>()?),
            Evaluator::Model { model, store } => {
                let fcfg = &model.arch.features;
                let mut out = Vec::with_capacity(seqs.len());
                for chunk in seqs.chunks(256) {
                    let trees = chunk
                        .iter()
                        .map(|s| TreeSample::featurize(program, s, fcfg))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let refs: Vec<&TreeSample> = trees.iter().collect();
                    out.extend(model.predict_batch(store, &refs)?);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub sequence: TransformationSequence,
    pub key: String,
    pub score: f64,
}

impl Scored {
    fn new(sequence: TransformationSequence, score: f64) -> Self {
        Self {
            key: sequence.key(),
            sequence,
            score,
        }
    }

    /// Better-first ordering: higher score, then smaller key.
    fn rank(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.key.cmp(&other.key))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLevel {
    pub level: usize,
    pub beam: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: Scored,
    pub trace: Vec<TraceLevel>,
    /// Number of candidates scored, the root included.
    pub evaluations: usize,
    pub eval_time: Duration,
}

/// Applicable one-step extensions of `seq`.
pub fn extensions(program: &Program, seq: &TransformationSequence) -> Vec<TransformationSequence> {
    candidates(program.max_depth())
        .into_iter()
        .map(|t| seq.with(t))
        .filter(|s| applicable_program(s, program).is_empty())
        .collect()
}

fn check_program(program: &Program) -> Result<()> {
    let v = validate(program);
    if let Some(first) = v.first() {
        return Err(SearchError::InvalidProgram {
            id: program.id.clone(),
            message: format!("{}: {}", first.location, first.message),
        });
    }
    Ok(())
}

pub fn search(program: &Program, evaluator: &Evaluator<'_>, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    check_program(program)?;
    let mut eval_time = Duration::ZERO;
    let mut timed = |seqs: &[TransformationSequence]| -> Result<Vec<f64>> {
        let t = Instant::now();
        let s = evaluator.score(program, seqs);
        eval_time += t.elapsed();
        s
    };
    let root = TransformationSequence::empty();
    let root_score = timed(std::slice::from_ref(&root))?[0];
    let mut best = Scored::new(root.clone(), root_score);
    let mut beam = vec![best.clone()];
    let mut trace = Vec::new();
    let mut evaluations = 1;
    for level in 1..=cfg.max_depth {
        let frontier: Vec<TransformationSequence> = beam.iter().flat_map(|m| extensions(program, &m.sequence)).collect();
        if frontier.is_empty() {
            break;
        }
        let scores = timed(&frontier)?;
        evaluations += frontier.len();
        let mut scored: Vec<Scored> = frontier.into_iter().zip(scores).map(|(s, v)| Scored::new(s, v)).collect();
        scored.sort_by(Scored::rank);
        scored.truncate(cfg.beam_width);
        if scored[0].rank(&best) == Ordering::Less {
            best = scored[0].clone();
        }
        trace.push(TraceLevel {
            level,
            beam: scored.iter().map(|s| s.sequence.to_string()).collect(),
            scores: scored.iter().map(|s| s.score).collect(),
        });
        beam = scored;
    }
    Ok(SearchResult {
        best,
        trace,
        evaluations,
        eval_time,
    })
}

/// Every applicable sequence of length at most `max_depth`, the empty one
/// included, in depth-first order.
pub fn enumerate_sequences(program: &Program, max_depth: usize) -> Vec<TransformationSequence> {
    fn rec(program: &Program, seq: TransformationSequence, max_depth: usize, out: &mut Vec<TransformationSequence>) {
        let next = if seq.len() < max_depth {
            extensions(program, &seq)
        } else {
            Vec::new()
        };
        out.push(seq);
        for s in next {
            rec(program, s, max_depth, out);
        }
    }
    let mut out = Vec::new();
    rec(program, TransformationSequence::empty(), max_depth, &mut out);
    out
}

/// Argmax over the full space with the same tie rule as [`search`].
pub fn brute_force(program: &Program, evaluator: &Evaluator<'_>, max_depth: usize) -> Result<Scored> {
    check_program(program)?;
    let all = enumerate_sequences(program, max_depth);
    let scores = evaluator.score(program, &all)?;
    Ok(all
        .into_iter()
        .zip(scores)
        .map(|(s, v)| Scored::new(s, v))
        .min_by(Scored::rank)
        .expect("the empty sequence is always present"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub program_id: String,
    pub evaluator: String,
    pub chosen_sequence: String,
    pub true_speedup: f64,
}

/// One cell of the pairwise comparison: how often `a` beat `b` and the
/// ratio of their geometric means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub a: String,
    pub b: String,
    pub a_wins: usize,
    pub programs: usize,
    pub geomean_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub geomeans: Vec<(String, f64)>,
    pub ratios: Vec<RatioRow>,
}

pub fn geomean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Searches every program with every evaluator and scores each chosen
/// sequence with the oracle.
pub fn benchmark_models(
    programs: &[Program],
    evaluators: &[(String, Evaluator<'_>)],
    machine: &MachineConfig,
    cfg: &SearchConfig,
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut truth: Vec<Vec<f64>> = vec![Vec::with_capacity(programs.len()); evaluators.len()];
    for program in programs {
        for (i, (name, ev)) in evaluators.iter().enumerate() {
            let found = search(program, ev, cfg)?;
            let s = speedup(program, &found.best.sequence, machine)?;
            truth[i].push(s);
            rows.push(BenchRow {
                program_id: program.id.clone(),
                evaluator: name.clone(),
                chosen_sequence: found.best.sequence.to_string(),
                true_speedup: s,
            });
        }
    }
    let geomeans: Vec<(String, f64)> = evaluators.iter().zip(&truth).map(|((n, _), t)| (n.clone(), geomean(t))).collect();
    let mut ratios = Vec::new();
    for (i, (a, _)) in evaluators.iter().enumerate() {
        for (j, (b, _)) in evaluators.iter().enumerate() {
            if i == j {
                continue;
            }
            ratios.push(RatioRow {
                a: a.clone(),
                b: b.clone(),
                a_wins: truth[i].iter().zip(&truth[j]).filter(|(x, y)| x > y).count(),
                programs: programs.len(),
                geomean_ratio: geomeans[i].1 / geomeans[j].1,
            });
        }
    }
    Ok(BenchReport { rows, geomeans, ratios })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub evaluator: String,
    pub candidates: usize,
    pub mean_latency: Duration,
}

/// Mean wall-clock evaluation time per candidate during search, over
/// `repeats` passes of the program set.
pub fn timing_probe(
    programs: &[Program],
    evaluators: &[(String, Evaluator<'_>)],
    cfg: &SearchConfig,
    repeats: usize,
) -> Result<Vec<TimingReport>> {
    let mut out = Vec::new();
    for (name, ev) in evaluators {
        let mut total = Duration::ZERO;
        let mut count = 0;
        for _ in 0..repeats.max(1) {
            for p in programs {
                let r = search(p, ev, cfg)?;
                total += r.eval_time;
                count += r.evaluations;
            }
        }
        out.push(TimingReport {
            evaluator: name.clone(),
            candidates: count,
            mean_latency: total / count.max(1) as u32,
        });
    }
    Ok(out)
}
