//! Layers, initialization, optimizer and random streams.

mod adam;
mod layers;
pub mod rng;

pub use adam::Adam;
pub use layers::{BatchNorm, BatchStats, Dense, Dropout, Init};
pub use rng::Rng;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Array, Param};

/// Anything with trainable parameters and (optionally) non-trainable buffers.
///
/// The enumeration order of both lists is stable and is the order used by
/// optimizers and by the weight archive.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Non-trainable state such as batch-norm running statistics.
    fn buffers(&self) -> Vec<(String, &Array)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Array)> {
        Vec::new()
    }

    /// `(name, value)` for every parameter, then every buffer.
    fn named_state(&self) -> Vec<(String, &Array)> {
        let mut out: Vec<(String, &Array)> = self
            .params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value()))
            .collect();
        out.extend(self.buffers());
        out
    }

    /// Overwrite every parameter and buffer from `state`. Each entry must be
    /// present with a matching shape.
    fn load_state(&mut self, state: &HashMap<String, Array>) -> Result<()> {
        for p in self.params_mut() {
            let name = p.name().to_string();
            *p.value_mut() = take_entry(state, &name, p.shape())?;
        }
        for (name, buf) in self.buffers_mut() {
            *buf = take_entry(state, &name, buf.shape())?;
        }
        Ok(())
    }
}

fn take_entry(state: &HashMap<String, Array>, name: &str, shape: &[usize]) -> Result<Array> {
    let a = state
        .get(name)
        .ok_or_else(|| Error::Archive(format!("missing entry {name}")))?;
    if a.shape() != shape {
        return Err(Error::Archive(format!(
            "entry {name} has shape {:?}, expected {shape:?}",
            a.shape()
        )));
    }
    Ok(a.clone())
}
