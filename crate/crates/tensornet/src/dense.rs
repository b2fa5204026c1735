//! Fully connected layers operating on row-major batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{gemm, NumArray};
use crate::error::{NetError, Result};
use crate::params::{ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative given the pre-activation `z` and output `y`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(z),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    // log(1 + e^z) without overflow
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `y = act(x W^T + b)` with `W` of shape `out x in`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// What a forward pass keeps for the backward pass.
#[derive(Clone, Debug)]
pub struct DenseCache {
    pub pre: NumArray,
    pub out: NumArray,
}

impl Dense {
    /// Registers `{prefix}.w` and `{prefix}.b` in `store`.
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_glorot(format!("{prefix}.w"), outputs, inputs, rng)?;
        let bias = store.add_constant(format!("{prefix}.b"), &[outputs], 0.0)?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
            activation,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &NumArray) -> Result<DenseCache> {
        if x.shape().len() != 2 || x.cols() != self.inputs {
            return Err(NetError::Shape(format!(
                "dense layer expects [batch, {}], got {:?}",
                self.inputs,
                x.shape()
            )));
        }
        let batch = x.rows();
        let mut pre = NumArray::zeros(&[batch, self.outputs]);
        let bias = store.value(self.bias).data();
        for r in 0..batch {
            pre.row_mut(r).copy_from_slice(bias);
        }
        gemm(1.0, x, false, store.value(self.weight), true, 1.0, &mut pre);
        let out = if self.activation == Activation::Identity {
            pre.clone()
        } else {
            let mut out = pre.clone();
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = self.activation.apply(*v));
            out
        };
        Ok(DenseCache { pre, out })
    }

    /// Forward pass that keeps only the output.
    pub fn infer(&self, store: &ParameterStore, x: &NumArray) -> Result<NumArray> {
        self.forward(store, x).map(|c| c.out)
    }

    /// Accumulates parameter gradients (unless frozen) and returns `dx` when
    /// `need_dx` is set.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        x: &NumArray,
        cache: &DenseCache,
        dy: &NumArray,
        need_dx: bool,
    ) -> Result<Option<NumArray>> {
        if dy.shape() != cache.out.shape() {
            return Err(NetError::Shape(format!(
                "dense backward: dy {:?} vs y {:?}",
                dy.shape(),
                cache.out.shape()
            )));
        }
        let mut dz = dy.clone();
        if self.activation != Activation::Identity {
            for ((d, z), y) in dz
                .data_mut()
                .iter_mut()
                .zip(cache.pre.data())
                .zip(cache.out.data())
            {
                *d *= self.activation.derivative(*z, *y);
            }
        }
        let w = store.get_mut(self.weight);
        if !w.frozen {
            gemm(1.0, &dz, true, x, false, 1.0, &mut w.grad);
        }
        let b = store.get_mut(self.bias);
        if !b.frozen {
            let g = b.grad.data_mut();
            for r in 0..dz.rows() {
                for (gi, di) in g.iter_mut().zip(dz.row(r)) {
                    *gi += di;
                }
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = NumArray::zeros(&[dz.rows(), self.inputs]);
        gemm(1.0, &dz, false, store.value(self.weight), false, 0.0, &mut dx);
        Ok(Some(dx))
    }
}

/// A stack of dense layers applied in order.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    input: NumArray,
    caches: Vec<DenseCache>,
}

impl MlpCache {
    pub fn output(&self) -> &NumArray {
        &self.caches.last().expect("non-empty mlp").out
    }
}

impl Mlp {
    /// `widths` includes the input width: `[in, h1, ..., out]`. Hidden layers
    /// use `hidden`, the last layer uses `last`.
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NetError::Contract("mlp needs at least two widths".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Dense::new(store, &format!("{prefix}.{i}"), widths[i], widths[i + 1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn forward(&self, store: &ParameterStore, x: &NumArray) -> Result<MlpCache> {
        let mut caches: Vec<DenseCache> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = caches.last().map(|c| &c.out).unwrap_or(x);
            let c = layer.forward(store, input)?;
            caches.push(c);
        }
        Ok(MlpCache {
            input: x.clone(),
            caches,
        })
    }

    pub fn infer(&self, store: &ParameterStore, x: &NumArray) -> Result<NumArray> {
        let mut cur = self.layers[0].infer(store, x)?;
        for layer in &self.layers[1..] {
            cur = layer.infer(store, &cur)?;
        }
        Ok(cur)
    }

    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &MlpCache,
        dy: &NumArray,
        need_dx: bool,
    ) -> Result<Option<NumArray>> {
        let mut grad = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = if i == 0 {
                &cache.input
            } else {
                &cache.caches[i - 1].out
            };
            let want_dx = i > 0 || need_dx;
            match layer.backward(store, input, &cache.caches[i], &grad, want_dx)? {
                Some(dx) => grad = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    /// True when every parameter of the stack is frozen.
    pub fn is_frozen(&self, store: &ParameterStore) -> bool {
        self.layers
            .iter()
            .all(|l| store.get(l.weight).frozen && store.get(l.bias).frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Dense::new(&mut store, "l", 3, 3, Activation::Identity, &mut rng).unwrap();
        let eye = NumArray::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        store.get_mut(layer.weight).value = eye;
        let x = NumArray::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(layer.infer(&store, &x).unwrap(), x);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Dense::new(&mut store, "l", 3, 2, Activation::Relu, &mut rng).unwrap();
        let x = NumArray::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(layer.forward(&store, &x), Err(NetError::Shape(_))));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn glorot_limits() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = Dense::new(&mut store, "l", 10, 6, Activation::Relu, &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(store.value(layer.weight).data().iter().all(|w| w.abs() <= limit));
        assert!(store.value(layer.bias).data().iter().all(|&b| b == 0.0));
    }
}
