//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it happens; [`Tape::backward`]
//! walks the record once in reverse, so the node list is topologically
//! ordered by construction. Tapes are rebuilt per forward pass and are
//! single-threaded; the arrays they hand out are immutable and safe to
//! share across threads.

use std::cell::RefCell;
use std::rc::Rc;

use super::NdArray;
use crate::error::{Error, Result};

/// Saved context handed to a backward rule: parent values and the op output.
pub(crate) struct Saved {
    pub parents: Vec<NdArray>,
    pub output: NdArray,
}

/// Backward rule: upstream gradient (flat, output-shaped) in, one optional
/// gradient contribution per parent out. `needs[i]` tells the rule whether
/// parent `i` wants a gradient at all.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &Saved, &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: NdArray,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Shared handle to the recording. Cloning shares the same tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}


impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lifts a value onto the tape. Only `requires_grad` leaves (and values
    /// computed from them) accumulate gradients.
    pub fn leaf(&self, value: NdArray, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: requires_grad,
            grad: None,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: NdArray) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(NdArray::scalar(value))
    }

    pub(crate) fn record(&self, parents: &[&Var], value: NdArray, backward: BackwardFn) -> Var {
        let mut inner = self.inner.borrow_mut();
        let mut needs_grad = false;
        let parent_ids: Vec<usize> = parents
            .iter()
            .map(|p| {
                assert!(
                    Rc::ptr_eq(&self.inner, &p.tape.inner),
                    "vars from different tapes combined in one op"
                );
                needs_grad |= inner.nodes[p.id].needs_grad;
                p.id
            })
            .collect();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents: parent_ids,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
            grad: None,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// node on a `requires_grad` path; repeated calls keep accumulating.
    pub fn backward(&self, output: &Var) -> Result<()> {
        assert!(
            Rc::ptr_eq(&self.inner, &output.tape.inner),
            "backward called with a var from another tape"
        );
        let mut inner = self.inner.borrow_mut();
        if inner.nodes[output.id].value.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar output, got shape {:?}",
                inner.nodes[output.id].value.shape()
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        pending[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let contributions = if let Some(bw) = &node.backward {
                let saved = Saved {
                    parents: node
                        .parents
                        .iter()
                        .map(|&p| inner.nodes[p].value.clone())
                        .collect(),
                    output: node.value.clone(),
                };
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| inner.nodes[p].needs_grad)
                    .collect();
                Some((node.parents.clone(), bw(&g, &saved, &needs)))
            } else {
                None
            };
            accumulate(&mut inner.nodes[id].grad, &g);
            if let Some((parents, contribs)) = contributions {
                for (slot, contrib) in parents.iter().zip(contribs) {
                    let Some(contrib) = contrib else { continue };
                    if !inner.nodes[*slot].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(contrib.len(), inner.nodes[*slot].value.numel());
                    match &mut pending[*slot] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += c;
                            }
                        }
                        slot_g => *slot_g = Some(contrib),
                    }
                }
            }
        }
        Ok(())
    }
}

impl Tape {
    /// Gradients of every requires-grad leaf, keyed by the leaf value's
    /// buffer id and summed across repeated lifts of the same buffer — this
    /// is how shared weights (lifted once per use) get one gradient.
    pub fn leaf_grads_by_buffer(&self) -> std::collections::HashMap<usize, NdArray> {
        let inner = self.inner.borrow();
        let mut out: std::collections::HashMap<usize, NdArray> = std::collections::HashMap::new();
        for node in &inner.nodes {
            if !node.parents.is_empty() || !node.needs_grad {
                continue;
            }
            let Some(grad) = &node.grad else { continue };
            let key = node.value.buffer_id();
            match out.remove(&key) {
                Some(existing) => {
                    let summed: Vec<f64> = existing
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(a, b)| a + b)
                        .collect();
                    out.insert(key, NdArray::new_unchecked(node.value.shape(), summed));
                }
                None => {
                    out.insert(
                        key,
                        NdArray::new_unchecked(node.value.shape(), grad.clone()),
                    );
                }
            }
        }
        out
    }
}

fn accumulate(grad: &mut Option<Vec<f64>>, g: &[f64]) {
    match grad {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        none => *none = Some(g.to_vec()),
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// The recorded value (cheap clone of a shared buffer).
    pub fn value(&self) -> NdArray {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<NdArray> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| NdArray::new_unchecked(node.value.shape(), g.clone()))
    }

    /// Re-enters the value as a constant leaf: gradients stop here.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }
}
