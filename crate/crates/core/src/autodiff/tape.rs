use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Vector-Jacobian product of one recorded operation.
///
/// `backward` receives the input values, the output value and the gradient of
/// the loss with respect to the output. It returns one entry per input; an
/// entry may be `None` when `needs[i]` is false.
pub trait Function {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    func: Option<Box<dyn Function>>,
}

/// Linear record of a forward computation, consumed by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// Values that do not depend on a parameter are stored as constants and carry
/// no backward closure.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
    frozen: bool,
    first_non_finite: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first recorded op whose output contained NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node { value, requires_grad: false, inputs: vec![], func: None })
    }

    /// Records a grad-enabled parameter. Registering the same name twice
    /// returns the first handle, so every use accumulates into one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&idx) = self.params.get(name) {
            return Var(idx);
        }
        let v = self.push(Node {
            value: value.clone(),
            requires_grad: true,
            inputs: vec![],
            func: None,
        });
        self.params.insert(name.to_string(), v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of parameters registered on this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Appends the result of an operation. The backward closure is kept only
    /// when some input requires a gradient.
    pub fn apply(&mut self, inputs: &[Var], output: Tensor, func: impl Function + 'static) -> Var {
        if self.first_non_finite.is_none() && !output.is_finite() {
            self.first_non_finite = Some(func.name());
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if !requires_grad {
            return self.constant(output);
        }
        self.push(Node {
            value: output,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            func: Some(Box::new(func)),
        })
    }

    /// Reverse sweep from a scalar loss. The recorded graph is released and
    /// the tape cannot be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        if self.frozen {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {shape:?}")));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Tape("loss does not depend on any parameter".into()));
        }
        if let Some(op) = self.first_non_finite {
            return Err(Error::Tape(format!("op `{op}` produced a non-finite output")));
        }
        self.frozen = true;

        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let Some(func) = node.func.as_ref() else {
                adj[idx] = Some(grad);
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let grads = func.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(grads.len(), node.inputs.len(), "op `{}`", func.name());
            for ((&input, g), need) in node.inputs.iter().zip(grads).zip(needs) {
                if !need {
                    continue;
                }
                let g = g.unwrap_or_else(|| panic!("op `{}` skipped a needed gradient", func.name()));
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input].value.shape(),
                    "op `{}` returned a gradient of the wrong shape",
                    func.name()
                );
                debug_assert!(g.is_finite(), "op `{}` produced a non-finite gradient", func.name());
                match &mut adj[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = GradMap::new();
        for (name, &idx) in &self.params {
            if idx <= loss.0 {
                if let Some(g) = adj[idx].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        self.nodes.clear();
        self.params.clear();
        Ok(out)
    }
}
