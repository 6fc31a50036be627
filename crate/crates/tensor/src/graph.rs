use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::param::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Arguments handed to a backward closure.
pub struct BackCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Whether each input needs a gradient; closures may return `None` where false.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run computation tape.
///
/// Operations take `&self` so that calls can be nested
/// (`g.relu(g.conv3d(..))`); nodes are appended in evaluation order, which is
/// also a valid topological order for the reverse sweep.
pub struct Graph<'s, T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    store: Option<&'s ParamStore<T>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Float> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), store: None, param_vars: RefCell::new(HashMap::new()) }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self { store: Some(store), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(Node { value, parents: vec![], backward: None, requires_grad: false, param: None })
    }

    /// Leaf whose gradient is retained in [`Gradients::get`].
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(Node { value, parents: vec![], backward: None, requires_grad: true, param: None })
    }

    /// Parameter leaf read from the attached store. Repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let store = self.store.expect("graph has no parameter store attached");
        let value = store.get(id).clone();
        let var = self.push(Node { value, parents: vec![], backward: None, requires_grad: true, param: Some(id) });
        self.param_vars.borrow_mut().insert(id, var);
        var
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation. `backward` maps the output gradient to one optional
    /// gradient per input, in input order.
    pub fn custom(
        &self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            param: None,
        })
    }

    /// Runs `f` on the values of `inputs` and records the result with `backward`.
    pub(crate) fn op(
        &self,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor<T>]) -> Tensor<T>,
        backward: impl Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            forward(&vals)
        };
        self.custom(inputs, value, backward)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.tensor(v);
        self.input(t)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        assert_eq!(root.value.numel(), 1, "backward() needs a scalar loss, got {:?}", root.value.shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        let mut out = Gradients { params: HashMap::new(), leaves: HashMap::new() };

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(bw) => {
                    let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let ctx = BackCtx { inputs: &inputs, output: &node.value, grad: &grad, needs: &needs };
                    let res = bw(&ctx);
                    debug_assert_eq!(res.len(), node.parents.len());
                    for ((&p, g), &need) in node.parents.iter().zip(res).zip(&needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        assert_eq!(
                            g.shape(),
                            nodes[p].value.shape(),
                            "gradient shape mismatch flowing into node {p}"
                        );
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                None => match node.param {
                    Some(id) => {
                        out.params.insert(id, grad);
                    }
                    None => {
                        out.leaves.insert(i, grad);
                    }
                },
            }
        }
        out
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of a [`Graph::leaf`].
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}
