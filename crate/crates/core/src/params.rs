//! Named trainable arrays and their gradient slots.
//!
//! Gradients live outside the values so a [`crate::tensor::Tape`] can borrow
//! every parameter immutably during the forward pass while backward writes
//! into the [`GradStore`]. Row-level dirty tracking keeps zeroing and sparse
//! lookups (subword tables with ~50k rows) proportional to the rows that
//! were actually used in a step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.id(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

/// Which rows of a gradient slot may be non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dirty<'a> {
    None,
    All,
    Rows(&'a [usize]),
}

#[derive(Debug, Clone)]
struct Slot {
    grad: Vec<f64>,
    row_width: usize,
    all_dirty: bool,
    row_flags: Vec<bool>,
    rows: Vec<usize>,
}

impl Slot {
    fn new(t: &Tensor) -> Self {
        let row_width = row_width(t);
        Self {
            grad: vec![0.0; t.len()],
            row_width,
            all_dirty: false,
            row_flags: vec![false; t.len() / row_width.max(1)],
            rows: Vec::new(),
        }
    }
}

fn row_width(t: &Tensor) -> usize {
    match t.shape() {
        [] => 1,
        [n] => *n,
        s => s[1..].iter().product(),
    }
}

/// Gradient slots matching a [`ParameterStore`] one-to-one.
#[derive(Debug, Clone)]
pub struct GradStore {
    slots: Vec<Slot>,
}

impl GradStore {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            slots: params.values.iter().map(Slot::new).collect(),
        }
    }

    /// A store with no slots; backward through a parameter leaf fails.
    pub fn empty() -> Self {
        Self { slots: Vec::new() }
    }

    fn slot(&mut self, id: ParamId) -> Result<&mut Slot> {
        let n = self.slots.len();
        self.slots.get_mut(id.0).ok_or(Error::OutOfRange {
            what: "gradient store",
            index: id.0,
            size: n,
        })
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let slot = self.slot(id)?;
        if slot.grad.len() != g.len() {
            return Err(crate::error::shape_err(
                "grad accumulate",
                &[slot.grad.len()],
                &[g.len()],
            ));
        }
        for (a, b) in slot.grad.iter_mut().zip(g) {
            *a += b;
        }
        slot.all_dirty = true;
        Ok(())
    }

    pub(crate) fn accumulate_row(&mut self, id: ParamId, row: usize, g: &[f64]) -> Result<()> {
        let slot = self.slot(id)?;
        let w = slot.row_width;
        let start = row * w;
        let dst = &mut slot.grad[start..start + w];
        for (a, b) in dst.iter_mut().zip(g) {
            *a += b;
        }
        if !slot.row_flags[row] {
            slot.row_flags[row] = true;
            slot.rows.push(row);
        }
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0].grad
    }

    pub fn row_width(&self, id: ParamId) -> usize {
        self.slots[id.0].row_width
    }

    pub fn dirty(&self, id: ParamId) -> Dirty<'_> {
        let s = &self.slots[id.0];
        if s.all_dirty {
            Dirty::All
        } else if s.rows.is_empty() {
            Dirty::None
        } else {
            Dirty::Rows(&s.rows)
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Squared L2 norm over every slot.
    pub fn squared_norm(&self) -> f64 {
        (0..self.slots.len())
            .map(|i| {
                let id = ParamId(i);
                let s = &self.slots[i];
                match self.dirty(id) {
                    Dirty::None => 0.0,
                    Dirty::All => s.grad.iter().map(|g| g * g).sum(),
                    Dirty::Rows(rows) => rows
                        .iter()
                        .flat_map(|&r| &s.grad[r * s.row_width..(r + 1) * s.row_width])
                        .map(|g| g * g)
                        .sum(),
                }
            })
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for s in &mut self.slots {
            if s.all_dirty {
                s.grad.iter_mut().for_each(|g| *g *= factor);
            } else {
                for &r in &s.rows {
                    s.grad[r * s.row_width..(r + 1) * s.row_width]
                        .iter_mut()
                        .for_each(|g| *g *= factor);
                }
            }
        }
    }

    /// Zero every slot, touching only rows that were written.
    pub fn zero(&mut self) {
        for s in &mut self.slots {
            if s.all_dirty {
                s.grad.iter_mut().for_each(|g| *g = 0.0);
                s.row_flags.iter_mut().for_each(|f| *f = false);
            } else {
                for &r in &s.rows {
                    s.grad[r * s.row_width..(r + 1) * s.row_width]
                        .iter_mut()
                        .for_each(|g| *g = 0.0);
                    s.row_flags[r] = false;
                }
            }
            s.rows.clear();
            s.all_dirty = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_clears_only_dirty_state() {
        let mut p = ParameterStore::new();
        let id = p.add("table", Tensor::zeros(&[4, 2]));
        let mut g = GradStore::new(&p);
        g.accumulate_row(id, 2, &[1.0, 2.0]).unwrap();
        g.accumulate_row(id, 2, &[1.0, 2.0]).unwrap();
        assert_eq!(g.dirty(id), Dirty::Rows(&[2]));
        assert_eq!(&g.grad(id)[4..6], &[2.0, 4.0]);
        assert_eq!(g.squared_norm(), 20.0);
        g.zero();
        assert_eq!(g.dirty(id), Dirty::None);
        assert!(g.grad(id).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_count() {
        let mut p = ParameterStore::new();
        p.add("a", Tensor::zeros(&[3, 2]));
        p.add("b", Tensor::zeros(&[5]));
        assert_eq!(p.num_scalars(), 11);
        assert_eq!(p.id("b"), Some(ParamId(1)));
    }
}
