//! Reverse-mode differentiation over a recorded forward pass.
//!
//! A [`Tape`] records leaves (inputs and parameters) and primitive op nodes
//! in topological order. Intermediate activations can be registered under a
//! name with [`Tape::tap`]; [`Tape::backward`] then returns the gradient of
//! the seeded output with respect to every parameter and every tapped value.

mod backward;
mod jacobian;
mod ops;

pub use backward::GradientSet;
pub use jacobian::jacobian;
pub use ops::BatchNormMode;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type ValueId = usize;
pub type ParamId = usize;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) ValueId);

impl Var {
    pub fn id(self) -> ValueId {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Input,
    Param(ParamId),
    Node(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T: Real> {
    pub(crate) op: ops::Op<T>,
    pub(crate) inputs: Vec<ValueId>,
    pub(crate) out: ValueId,
    pub(crate) saved: ops::Saved<T>,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    values: Vec<Tensor<T>>,
    sources: Vec<Source>,
    nodes: Vec<Node<T>>,
    taps: BTreeMap<String, ValueId>,
    output: Option<ValueId>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            sources: Vec::new(),
            nodes: Vec::new(),
            taps: BTreeMap::new(),
            output: None,
        }
    }

    /// Runs `forward` against a fresh tape and marks the returned value as
    /// the output.
    pub fn record<F>(forward: F) -> Result<(Tensor<T>, Tape<T>)>
    where
        F: FnOnce(&mut Tape<T>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let out = forward(&mut tape)?;
        tape.set_output(out);
        Ok((tape.value(out).clone(), tape))
    }

    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v.0);
    }

    pub fn output(&self) -> Option<Var> {
        self.output.map(Var)
    }

    /// Number of recorded op nodes (leaves excluded).
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Names of recorded ops in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, Source::Input)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push_leaf(value, Source::Param(id))
    }

    fn push_leaf(&mut self, value: Tensor<T>, source: Source) -> Var {
        self.values.push(value);
        self.sources.push(source);
        Var(self.values.len() - 1)
    }

    /// Registers `v` under `name` so its gradient is reported by backward.
    pub fn tap(&mut self, name: impl Into<String>, v: Var) -> Result<Var> {
        let name = name.into();
        if self.taps.contains_key(&name) {
            return Err(Error::Input(format!(
                "tap `{name}` registered twice in one forward pass"
            )));
        }
        self.taps.insert(name, v.0);
        Ok(v)
    }

    pub fn taps(&self) -> impl Iterator<Item = (&str, Var)> {
        self.taps.iter().map(|(k, &v)| (k.as_str(), Var(v)))
    }

    pub(crate) fn push_node(&mut self, op: ops::Op<T>, inputs: Vec<ValueId>) -> Result<Var> {
        let args: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.values[i]).collect();
        let (value, saved) = op.forward(&args)?;
        let out = self.values.len();
        self.values.push(value);
        self.sources.push(Source::Node(self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs,
            out,
            saved,
        });
        Ok(Var(out))
    }

    /// Recomputes every node from the recorded leaves and returns the output.
    pub fn replay(&self) -> Result<Tensor<T>> {
        let out = self
            .output
            .ok_or_else(|| Error::Input("tape has no output".into()))?;
        let mut values: Vec<Option<Tensor<T>>> = self
            .values
            .iter()
            .zip(&self.sources)
            .map(|(v, s)| match s {
                Source::Node(_) => None,
                _ => Some(v.clone()),
            })
            .collect();
        for node in &self.nodes {
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| values[i].as_ref().expect("topological order"))
                .collect();
            let (v, _) = node.op.forward(&args)?;
            values[node.out] = Some(v);
        }
        Ok(values[out].take().expect("output recorded"))
    }
}
