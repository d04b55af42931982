use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Which part of the model a parameter belongs to. Training stages update
/// disjoint groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Encoder weights (perturbed to build the second view).
    Encoder,
    /// Projection head.
    Head,
    /// Trimming scheduler.
    Scheduler,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Head => 1,
            ParamGroup::Scheduler => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamGroup::Encoder),
            1 => Some(ParamGroup::Head),
            2 => Some(ParamGroup::Scheduler),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
    pub has_grad: bool,
}

/// Named trainable tensors plus non-trainable buffers (normalization running
/// statistics). Iteration order is the lexicographic order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let grad = value.zeros_like();
        self.params.insert(
            name,
            Parameter {
                value,
                grad,
                group,
                has_grad: false,
            },
        );
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            p.has_grad = false;
        }
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone())))
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients of every bound parameter to its gradient slot.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bindings: &Bindings) {
        for (name, var) in &bindings.vars {
            if let Some(p) = self.params.get_mut(name) {
                if let Some(g) = grads.get(*var) {
                    p.grad.add_assign(g);
                }
                p.has_grad = true;
            }
        }
    }

    /// Flattened values of every parameter in `groups`, in name order.
    pub fn flat_values(&self, groups: &[ParamGroup]) -> Vec<f64> {
        self.params
            .values()
            .filter(|p| groups.contains(&p.group))
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self, groups: &[ParamGroup]) -> Vec<f64> {
        self.params
            .values()
            .filter(|p| groups.contains(&p.group))
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// Order-sensitive FNV-1a digest over the bit patterns of all values in `groups`.
    pub fn checksum(&self, groups: &[ParamGroup]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.params {
            if !groups.contains(&p.group) {
                continue;
            }
            for b in name.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
            for v in p.value.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

/// Tape variables standing for each named parameter during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Returns bindings where each parameter named in `offsets` is replaced by
    /// `param + offset` (offset recorded as a constant, so gradients still reach
    /// the original leaf).
    pub fn shifted(&self, tape: &mut Tape, offsets: &BTreeMap<String, Tensor>) -> Result<Bindings, TensorError> {
        let mut vars = self.vars.clone();
        for (name, delta) in offsets {
            let base = self.get(name)?;
            let c = tape.constant(delta.clone());
            let v = tape.add(base, c)?;
            vars.insert(name.clone(), v);
        }
        Ok(Bindings { vars })
    }
}
