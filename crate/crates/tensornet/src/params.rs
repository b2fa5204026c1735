//! Named trainable parameters with freeze flags and per-group learning-rate
//! scales.

use indexmap::IndexMap;
use rand::Rng;

use crate::array::NumArray;
use crate::error::{NetError, Result};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: NumArray,
    pub grad: NumArray,
    pub frozen: bool,
    pub lr_scale: f64,
    // Adam state. `steps` counts updates actually applied to this parameter,
    // so a parameter unfrozen late starts with fresh bias correction.
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    pub(crate) steps: u64,
}

impl Parameter {
    fn new(name: String, value: NumArray) -> Self {
        let n = value.len();
        Self {
            name,
            grad: NumArray::zeros(value.shape()),
            value,
            frozen: false,
            lr_scale: 1.0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Insertion-ordered map from parameter name to [`Parameter`].
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: IndexMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NumArray) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NetError::DuplicateParameter(name));
        }
        let (idx, _) = self
            .params
            .insert_full(name.clone(), Parameter::new(name, value));
        Ok(ParamId(idx))
    }

    /// Glorot-uniform weight matrix, `U(-sqrt(6/(in+out)), +sqrt(6/(in+out)))`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_out * fan_in)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.add(name, NumArray::matrix(fan_out, fan_in, data)?)
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        let mut arr = NumArray::zeros(shape);
        arr.fill(v);
        self.add(name, arr)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| NetError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NumArray {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        self.group_mut(prefix).map(|p| p.frozen = frozen).count()
    }

    pub fn set_lr_scale(&mut self, prefix: &str, scale: f64) -> usize {
        assert!(scale > 0.0, "lr_scale must be positive");
        self.group_mut(prefix).map(|p| p.lr_scale = scale).count()
    }

    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Parameter> + 'a {
        self.params.values().filter(move |p| p.name.starts_with(prefix))
    }

    pub fn group_mut<'a>(&'a mut self, prefix: &'a str) -> impl Iterator<Item = &'a mut Parameter> + 'a {
        self.params
            .values_mut()
            .filter(move |p| p.name.starts_with(prefix))
    }

    /// Flattened copy of the values of a parameter group, in store order.
    pub fn snapshot(&self, prefix: &str) -> Vec<f64> {
        self.group(prefix)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Copy values from `other` for every parameter name present in both.
    /// Shapes must agree. Returns the number of copied parameters.
    pub fn copy_values_from(&mut self, other: &ParameterStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in self.group_mut(prefix) {
            if let Some(src) = other.params.get(&p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(NetError::Shape(format!(
                        "parameter `{}`: {:?} vs {:?}",
                        p.name,
                        src.value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.add("a.w", NumArray::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            s.add("a.w", NumArray::zeros(&[1])),
            Err(NetError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn prefix_groups() {
        let mut s = ParameterStore::new();
        s.add("enc.l0.w", NumArray::zeros(&[1])).unwrap();
        s.add("enc.l0.b", NumArray::zeros(&[1])).unwrap();
        s.add("head.w", NumArray::zeros(&[1])).unwrap();
        assert_eq!(s.set_frozen("enc.", true), 2);
        assert!(!s.by_name("head.w").unwrap().frozen);
        assert_eq!(s.set_lr_scale("enc.", 0.2), 2);
        assert_eq!(s.by_name("enc.l0.b").unwrap().lr_scale, 0.2);
    }
}
