//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every op validates shapes, checks its output for non-finite values, and —
//! when any operand is attached to a [`Tape`] — records a backward closure.
//! Untracked tensors flow through the same ops with zero tape overhead, so
//! inference never retains activations.

mod check;
mod ops;
mod tape;

pub use check::{finite_diff, rel_err};
pub use ops::{mac_count, reset_mac_count};
pub use tape::{Gradients, Tape};

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use tape::{Node, TapeRef};

/// Scans a buffer and reports the first non-finite entry.
pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (index, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { op, index });
        }
    }
    Ok(())
}

#[derive(Clone)]
struct Track {
    tape: TapeRef,
    node: usize,
}

/// A row-major, heap-allocated f64 tensor.
///
/// Cloning is cheap: the buffer is shared behind an [`Arc`]. All ops produce
/// fresh buffers, so shared data is never mutated.
#[derive(Clone)]
pub struct Tensor {
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    track: Option<Track>,
}

impl Tensor {
    /// Builds an untracked tensor, validating element count against `shape`.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor {
            data: Arc::new(data),
            shape: shape.to_vec(),
            track: None,
        })
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            data: Arc::new(vec![0.0; numel]),
            shape: shape.to_vec(),
            track: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![value; numel], &[numel])?.reshape(shape)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::from_vec(vec![value], &[])
    }

    pub(crate) fn tracked(data: Arc<Vec<f64>>, shape: Vec<usize>, tape: TapeRef, node: usize) -> Self {
        Tensor {
            data,
            shape,
            track: Some(Track { tape, node }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Extracts the value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                lhs: self.shape.clone(),
                rhs: vec![1],
            });
        }
        Ok(self.data[0])
    }

    /// Whether this tensor participates in a tape.
    pub fn is_tracked(&self) -> bool {
        self.track.is_some()
    }

    /// Copy of the data with tape attachment removed. Gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            data: self.data.clone(),
            shape: self.shape.clone(),
            track: None,
        }
    }

    /// Reinterprets the buffer under a new shape without copying.
    ///
    /// The view shares the original's tape node, so gradients flow through
    /// reshapes for free.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            data: self.data.clone(),
            shape: shape.to_vec(),
            track: self.track.clone(),
        })
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.track.as_ref().map(|t| t.node)
    }

    pub(crate) fn track(&self) -> Option<(&TapeRef, usize)> {
        self.track.as_ref().map(|t| (&t.tape, t.node))
    }

    /// Core op constructor: checks the output for non-finite values and, when
    /// any input is tracked, records a node whose parent slots align with
    /// `inputs` (constants get a discarded slot).
    pub(crate) fn from_op(
        op: &'static str,
        inputs: &[&Tensor],
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        backward: impl FnOnce() -> tape::BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        check_finite(op, &data)?;
        let mut tape: Option<&TapeRef> = None;
        for t in inputs {
            if let Some(track) = &t.track {
                match tape {
                    None => tape = Some(&track.tape),
                    Some(existing) => {
                        if !Rc::ptr_eq(existing, &track.tape) {
                            return Err(Error::Tape(format!(
                                "{op}: operands belong to different tapes"
                            )));
                        }
                    }
                }
            }
        }
        let tape = match tape {
            Some(t) => t.clone(),
            None => {
                return Ok(Tensor {
                    data,
                    shape,
                    track: None,
                });
            }
        };
        let parents: Vec<Option<usize>> = inputs.iter().map(|t| t.node_id()).collect();
        let node = {
            let mut inner = tape.borrow_mut();
            inner.nodes.push(Node {
                parents,
                len: data.len(),
                backward: Some(backward()),
            });
            inner.nodes.len() - 1
        };
        Ok(Tensor::tracked(data, shape, tape, node))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.is_tracked())
            .field("data", &preview)
            .finish()
    }
}
