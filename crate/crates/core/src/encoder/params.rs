//! Flat parameter storage with a named-tensor layout.
//!
//! All parameters (and their gradients, and the optimizer moments) live in
//! one `Vec<f64>` addressed through a shared [`TensorLayout`]. That keeps
//! the optimizer a single loop, lets finite-difference checks perturb by
//! flat index, and makes checkpoint serialization a walk over named slices.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub dims: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TensorLayout {
    entries: Vec<LayoutEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl TensorLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder { layout: TensorLayout::default() }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&LayoutEntry> {
        self.by_name
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::config(format!("no tensor named `{name}` in layout")))
    }
}

pub struct LayoutBuilder {
    layout: TensorLayout,
}

impl LayoutBuilder {
    pub fn tensor(mut self, name: &str, dims: &[usize]) -> Self {
        debug_assert!(
            !self.layout.by_name.contains_key(name),
            "duplicate tensor name {name}"
        );
        let entry = LayoutEntry {
            name: name.to_string(),
            offset: self.layout.total,
            dims: dims.to_vec(),
        };
        self.layout.total += entry.len();
        self.layout.by_name.insert(name.to_string(), self.layout.entries.len());
        self.layout.entries.push(entry);
        self
    }

    pub fn build(self) -> Arc<TensorLayout> {
        Arc::new(self.layout)
    }
}

/// One flat value vector over a shared layout: parameters, gradients, and
/// Adam moments all use this shape.
#[derive(Debug, Clone)]
pub struct ParamVec {
    pub layout: Arc<TensorLayout>,
    pub data: Vec<f64>,
}

impl PartialEq for ParamVec {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.data == other.data
    }
}

impl ParamVec {
    pub fn zeros(layout: Arc<TensorLayout>) -> Self {
        let n = layout.total();
        ParamVec { layout, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVec) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || {
            self.layout.total() == other.layout.total()
                && self
                    .layout
                    .entries()
                    .iter()
                    .zip(other.layout.entries())
                    .all(|(a, b)| a.name == b.name && a.dims == b.dims)
        }
    }

    fn slice(&self, name: &str) -> Result<(&[f64], &LayoutEntry)> {
        let e = self.layout.entry(name)?;
        Ok((&self.data[e.offset..e.offset + e.len()], e))
    }

    fn slice_mut(&mut self, name: &str) -> Result<(&mut [f64], Vec<usize>)> {
        let e = self.layout.entry(name)?.clone();
        Ok((&mut self.data[e.offset..e.offset + e.len()], e.dims))
    }

    pub fn t1(&self, name: &str) -> ArrayView1<'_, f64> {
        let (s, e) = self.slice(name).expect("tensor name");
        debug_assert_eq!(e.dims.len(), 1, "{name} is not rank 1");
        ArrayView1::from(s)
    }

    pub fn t2(&self, name: &str) -> ArrayView2<'_, f64> {
        let (s, e) = self.slice(name).expect("tensor name");
        debug_assert_eq!(e.dims.len(), 2, "{name} is not rank 2");
        ArrayView2::from_shape((e.dims[0], e.dims[1]), s).expect("layout shape")
    }

    pub fn t1_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        let (s, dims) = self.slice_mut(name).expect("tensor name");
        debug_assert_eq!(dims.len(), 1, "{name} is not rank 1");
        ArrayViewMut1::from(s)
    }

    pub fn t2_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let (s, dims) = self.slice_mut(name).expect("tensor name");
        debug_assert_eq!(dims.len(), 2, "{name} is not rank 2");
        ArrayViewMut2::from_shape((dims[0], dims[1]), s).expect("layout shape")
    }

    /// Snap every value to the nearest f32. Parameters live on this grid so
    /// that 32-bit checkpoint payloads round-trip without value drift.
    pub fn round_to_f32_grid(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<TensorLayout> {
        TensorLayout::builder()
            .tensor("a.w", &[2, 3])
            .tensor("a.b", &[3])
            .tensor("c", &[4])
            .build()
    }

    #[test]
    fn offsets_pack_contiguously() {
        let l = layout();
        assert_eq!(l.total(), 6 + 3 + 4);
        assert_eq!(l.entry("a.w").unwrap().offset, 0);
        assert_eq!(l.entry("a.b").unwrap().offset, 6);
        assert_eq!(l.entry("c").unwrap().offset, 9);
        assert!(l.entry("missing").is_err());
    }

    #[test]
    fn views_alias_the_flat_data() {
        let mut p = ParamVec::zeros(layout());
        p.t2_mut("a.w")[(1, 2)] = 7.0;
        p.t1_mut("a.b")[0] = -1.0;
        assert_eq!(p.data[5], 7.0);
        assert_eq!(p.data[6], -1.0);
        assert_eq!(p.t2("a.w")[(1, 2)], 7.0);
    }

    #[test]
    fn f32_grid_rounding_is_idempotent() {
        let mut p = ParamVec::zeros(layout());
        p.data[0] = 0.1234567890123456789;
        p.round_to_f32_grid();
        let once = p.data[0];
        p.round_to_f32_grid();
        assert_eq!(p.data[0], once);
        assert_eq!(once, 0.1234567890123456789f32 as f64);
    }
}
