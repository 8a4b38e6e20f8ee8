//! Trainable parameters that outlive any single graph.

use std::sync::atomic::{AtomicU64, Ordering};

use super::array::Array;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

/// A named trainable array with an optional accumulated gradient.
///
/// Every parameter carries a process-unique id used to bind it onto a
/// [`Graph`](super::Graph). Cloning yields an independent parameter with a
/// fresh id, so a copied model never aliases the original on a graph.
#[derive(Debug)]
pub struct Param {
    uid: u64,
    name: String,
    value: Array,
    grad: Option<Array>,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_PARAM.fetch_add(1, Ordering::Relaxed),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl PartialEq for Param {
    /// Parameters compare by name and value, not identity.
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.value == other.value
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Self {
            uid: NEXT_PARAM.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array {
        &mut self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<&Array> {
        self.grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, g: &Array) {
        debug_assert_eq!(g.shape(), self.value.shape());
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
