//! Reverse-mode tape: a flat arena of nodes, each holding the closure that
//! maps its output gradient back onto its parents' gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps the gradient flowing into a node onto gradients for each logical
/// input, in the order the inputs were passed to the op.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Node {
    /// One slot per logical input of the op. `Some(id)` points at the tracked
    /// parent node; `None` marks a constant input whose gradient is discarded.
    pub parents: Vec<Option<usize>>,
    /// Element count of this node's value, used to validate gradient buffers.
    pub len: usize,
    /// `None` for leaf variables.
    pub backward: Option<BackwardFn>,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub spent: bool,
}

pub(crate) type TapeRef = Rc<RefCell<TapeInner>>;

/// Records every differentiable op performed on tensors created from it.
///
/// A tape is consumed by a single [`Tensor::backward`] call; reusing it
/// afterwards is an error. Dropping the tape (and all tensors holding it)
/// frees the recorded graph.
pub struct Tape {
    pub(crate) inner: TapeRef,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                spent: false,
            })),
        }
    }

    /// Registers a leaf variable whose gradient will be tracked.
    pub fn var(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "var",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        crate::tensor::check_finite("var", &data)?;
        let node = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                parents: Vec::new(),
                len: numel,
                backward: None,
            });
            inner.nodes.len() - 1
        };
        Ok(Tensor::tracked(
            std::sync::Arc::new(data),
            shape.to_vec(),
            self.inner.clone(),
            node,
        ))
    }

    /// Number of nodes recorded so far (leaves included).
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by one backward pass, keyed by tape node.
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`, as a flat slice.
    ///
    /// Returns `None` when `t` is untracked or was never reached by the
    /// backward sweep (e.g. it does not influence the root).
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node_id()?;
        self.grads.get(node)?.as_deref()
    }

    /// Like [`Gradients::get`] but wraps the result in an untracked tensor of
    /// `t`'s shape, erroring when no gradient was recorded.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let data = self
            .get(t)
            .ok_or_else(|| Error::Tape("no gradient recorded for this tensor".into()))?;
        Tensor::from_vec(data.to_vec(), t.shape())
    }
}

impl Tensor {
    /// Runs reverse-mode accumulation from a scalar root, consuming the tape.
    ///
    /// The root must hold exactly one element and must be tracked; a second
    /// backward on the same tape is rejected.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let (tape, root) = match self.track() {
            Some(t) => t,
            None => {
                return Err(Error::Tape(
                    "backward root is not attached to a tape".into(),
                ))
            }
        };
        {
            let mut inner = tape.borrow_mut();
            if inner.spent {
                return Err(Error::Tape("tape already consumed by backward".into()));
            }
            inner.spent = true;
        }
        let inner = tape.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &inner.nodes[id];
            let backward = match &node.backward {
                Some(f) => f,
                None => continue,
            };
            let grad_out = grads[id].as_ref().unwrap();
            debug_assert_eq!(grad_out.len(), node.len);
            let parts = backward(grad_out);
            debug_assert_eq!(parts.len(), node.parents.len());
            for (slot, part) in node.parents.iter().zip(parts) {
                let pid = match slot {
                    Some(pid) => *pid,
                    None => continue,
                };
                debug_assert_eq!(part.len(), inner.nodes[pid].len);
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, p) in acc.iter_mut().zip(&part) {
                            *a += p;
                        }
                    }
                    None => grads[pid] = Some(part),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
