//! LSTM cell unrolled over a sequence of input vectors.
//!
//! Gate rows of the fused weight matrix are ordered input, forget, cell,
//! output. The weight acts on the concatenation `[x_t; h_{t-1}]`.

use rand::Rng;

use crate::array::{axpy, dot, gemm, NumArray};
use crate::dense::sigmoid;
use crate::error::{NetError, Result};
use crate::params::{ParamId, ParameterStore};

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

#[derive(Clone, Debug)]
struct Step {
    xh: Vec<f64>,
    // activated gates, 4 * hidden: i, f, g, o
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

/// Per-step state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    steps: Vec<Step>,
}

impl LstmTrace {
    pub fn final_hidden(&self) -> &[f64] {
        &self.steps.last().expect("non-empty trace").h
    }

    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.steps[t].h
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl LstmCell {
    /// Registers `{prefix}.w` (`4h x (in + h)`) and `{prefix}.b` (`4h`). The
    /// forget-gate bias starts at 1.
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_glorot(
            format!("{prefix}.w"),
            4 * hidden_size,
            input_size + hidden_size,
            rng,
        )?;
        let mut b = NumArray::zeros(&[4 * hidden_size]);
        b.data_mut()[hidden_size..2 * hidden_size].fill(1.0);
        let bias = store.add(format!("{prefix}.b"), b)?;
        Ok(Self {
            weight,
            bias,
            input_size,
            hidden_size,
        })
    }

    /// Runs the recurrence from a zero state.
    pub fn forward(&self, store: &ParameterStore, inputs: &[&[f64]]) -> Result<LstmTrace> {
        if inputs.is_empty() {
            return Err(NetError::Contract("lstm over an empty sequence".into()));
        }
        let h = self.hidden_size;
        let w = store.value(self.weight);
        let b = store.value(self.bias).data();
        let mut steps: Vec<Step> = Vec::with_capacity(inputs.len());
        for x in inputs {
            if x.len() != self.input_size {
                return Err(NetError::Shape(format!(
                    "lstm input of length {}, expected {}",
                    x.len(),
                    self.input_size
                )));
            }
            let mut xh = Vec::with_capacity(self.input_size + h);
            xh.extend_from_slice(x);
            match steps.last() {
                Some(prev) => xh.extend_from_slice(&prev.h),
                None => xh.resize(self.input_size + h, 0.0),
            }
            let mut gates: Vec<f64> = (0..4 * h).map(|r| b[r] + dot(w.row(r), &xh)).collect();
            for (r, g) in gates.iter_mut().enumerate() {
                *g = if (2 * h..3 * h).contains(&r) {
                    g.tanh()
                } else {
                    sigmoid(*g)
                };
            }
            let mut c = vec![0.0; h];
            let mut hs = vec![0.0; h];
            for j in 0..h {
                let c_prev = steps.last().map_or(0.0, |s| s.c[j]);
                c[j] = gates[h + j] * c_prev + gates[j] * gates[2 * h + j];
                hs[j] = gates[3 * h + j] * c[j].tanh();
            }
            steps.push(Step { xh, gates, c, h: hs });
        }
        Ok(LstmTrace { steps })
    }

    /// Backpropagates `dh_final` through time. Accumulates weight gradients
    /// unless frozen and returns the gradient for each input vector.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        trace: &LstmTrace,
        dh_final: &[f64],
    ) -> Vec<Vec<f64>> {
        let h = self.hidden_size;
        let n_in = self.input_size;
        let frozen_w = store.get(self.weight).frozen;
        let frozen_b = store.get(self.bias).frozen;
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut dxs = vec![Vec::new(); trace.steps.len()];
        for t in (0..trace.steps.len()).rev() {
            let s = &trace.steps[t];
            let g = &s.gates;
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = s.c[j].tanh();
                let c_prev = if t > 0 { trace.steps[t - 1].c[j] } else { 0.0 };
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dcj * gg * i * (1.0 - i);
                dz[h + j] = dcj * c_prev * f * (1.0 - f);
                dz[2 * h + j] = dcj * i * (1.0 - gg * gg);
                dz[3 * h + j] = dh[j] * tc * o * (1.0 - o);
                dc[j] = dcj * f;
            }
            if !frozen_w {
                let wg = &mut store.get_mut(self.weight).grad;
                for (r, &d) in dz.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &s.xh, wg.row_mut(r));
                    }
                }
            }
            if !frozen_b {
                axpy(1.0, &dz, store.get_mut(self.bias).grad.data_mut());
            }
            let w = store.value(self.weight);
            let mut dxh = vec![0.0; n_in + h];
            for (r, &d) in dz.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, w.row(r), &mut dxh);
                }
            }
            dh.copy_from_slice(&dxh[n_in..]);
            dxh.truncate(n_in);
            dxs[t] = dxh;
        }
        dxs
    }
}

/// State of a batched run. Sequences are ordered longest first, so the
/// rows of step `t` are exactly the sequences still running at `t`.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    lens: Vec<usize>,
    steps: Vec<BatchStep>,
}

#[derive(Clone, Debug)]
struct BatchStep {
    xh: NumArray,
    gates: NumArray,
    c: NumArray,
    h: NumArray,
}

impl BatchTrace {
    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// Last hidden state of every sequence, `[n, hidden]`.
    pub fn final_hidden(&self) -> NumArray {
        let h = self.steps[0].h.cols();
        let mut out = NumArray::zeros(&[self.lens.len(), h]);
        for (i, &len) in self.lens.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.steps[len - 1].h.row(i));
        }
        out
    }
}

impl LstmCell {
    /// Runs many sequences at once. `inputs[t]` has one row per sequence
    /// still running at step `t`; row counts must be non-increasing.
    pub fn forward_batch(&self, store: &ParameterStore, inputs: &[NumArray]) -> Result<BatchTrace> {
        let n = inputs.first().map(|x| x.rows()).unwrap_or(0);
        if n == 0 {
            return Err(NetError::Contract("lstm over an empty sequence".into()));
        }
        let h = self.hidden_size;
        let width = self.input_size + h;
        let w = store.value(self.weight);
        let b = store.value(self.bias).data();
        let mut steps: Vec<BatchStep> = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            let a = x.rows();
            if x.cols() != self.input_size {
                return Err(NetError::Shape(format!(
                    "lstm step {t} has width {}, expected {}",
                    x.cols(),
                    self.input_size
                )));
            }
            if a == 0 || steps.last().is_some_and(|p: &BatchStep| p.h.rows() < a) {
                return Err(NetError::Contract("batched lstm rows must be non-increasing and nonzero".into()));
            }
            let mut xh = NumArray::zeros(&[a, width]);
            for r in 0..a {
                let row = xh.row_mut(r);
                row[..self.input_size].copy_from_slice(x.row(r));
                if let Some(prev) = steps.last() {
                    row[self.input_size..].copy_from_slice(prev.h.row(r));
                }
            }
            let mut gates = NumArray::zeros(&[a, 4 * h]);
            for r in 0..a {
                gates.row_mut(r).copy_from_slice(b);
            }
            gemm(1.0, &xh, false, w, true, 1.0, &mut gates);
            let mut c = NumArray::zeros(&[a, h]);
            let mut hs = NumArray::zeros(&[a, h]);
            for r in 0..a {
                let g = gates.row_mut(r);
                for (k, v) in g.iter_mut().enumerate() {
                    *v = if (2 * h..3 * h).contains(&k) { v.tanh() } else { sigmoid(*v) };
                }
                let g = gates.row(r);
                let c_prev = steps.last().map(|p| p.c.row(r));
                let (cr, hr) = (c.row_mut(r), hs.row_mut(r));
                for j in 0..h {
                    let cp = c_prev.map_or(0.0, |cp| cp[j]);
                    cr[j] = g[h + j] * cp + g[j] * g[2 * h + j];
                }
                for j in 0..h {
                    hr[j] = g[3 * h + j] * cr[j].tanh();
                }
            }
            steps.push(BatchStep { xh, gates, c, h: hs });
        }
        let lens = (0..n)
            .map(|i| inputs.iter().take_while(|x| x.rows() > i).count())
            .collect();
        Ok(BatchTrace { lens, steps })
    }

    /// Backward pass of [`forward_batch`](Self::forward_batch) given the
    /// gradient of every sequence's last hidden state. Returns the input
    /// gradients step by step, shaped like the inputs.
    pub fn backward_batch(&self, store: &mut ParameterStore, trace: &BatchTrace, dh_final: &NumArray) -> Vec<NumArray> {
        let h = self.hidden_size;
        let n = trace.lens.len();
        let n_in = self.input_size;
        let frozen_w = store.get(self.weight).frozen;
        let frozen_b = store.get(self.bias).frozen;
        let mut dh = NumArray::zeros(&[n, h]);
        let mut dc = NumArray::zeros(&[n, h]);
        let mut dxs = vec![NumArray::zeros(&[0]); trace.steps.len()];
        for t in (0..trace.steps.len()).rev() {
            let s = &trace.steps[t];
            let a = s.h.rows();
            for i in 0..a {
                if trace.lens[i] == t + 1 {
                    axpy(1.0, dh_final.row(i), dh.row_mut(i));
                }
            }
            let mut dz = NumArray::zeros(&[a, 4 * h]);
            for r in 0..a {
                let g = s.gates.row(r);
                let c = s.c.row(r);
                let c_prev = if t > 0 { Some(trace.steps[t - 1].c.row(r)) } else { None };
                let dhr = dh.row(r).to_vec();
                let dcr = dc.row_mut(r);
                let dzr = dz.row_mut(r);
                for j in 0..h {
                    let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = c[j].tanh();
                    let cp = c_prev.map_or(0.0, |cp| cp[j]);
                    let dcj = dcr[j] + dhr[j] * o * (1.0 - tc * tc);
                    dzr[j] = dcj * gg * i * (1.0 - i);
                    dzr[h + j] = dcj * cp * f * (1.0 - f);
                    dzr[2 * h + j] = dcj * i * (1.0 - gg * gg);
                    dzr[3 * h + j] = dhr[j] * tc * o * (1.0 - o);
                    dcr[j] = dcj * f;
                }
            }
            if !frozen_w {
                gemm(1.0, &dz, true, &s.xh, false, 1.0, &mut store.get_mut(self.weight).grad);
            }
            if !frozen_b {
                let bg = store.get_mut(self.bias).grad.data_mut();
                for r in 0..a {
                    axpy(1.0, dz.row(r), bg);
                }
            }
            let mut dxh = NumArray::zeros(&[a, n_in + h]);
            gemm(1.0, &dz, false, store.value(self.weight), false, 0.0, &mut dxh);
            let mut dx = NumArray::zeros(&[a, n_in]);
            for r in 0..a {
                let row = dxh.row(r);
                dx.row_mut(r).copy_from_slice(&row[..n_in]);
                dh.row_mut(r).copy_from_slice(&row[n_in..]);
            }
            dxs[t] = dx;
        }
        dxs
    }
}
