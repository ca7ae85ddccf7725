//! Periodic grids on the real torus `[0, 2π)^n` and the fields that live on them.
//!
//! Nodes are stored row-major with the last axis fastest. Because the first
//! `base_dims` axes are the slowest ones, a node index splits as
//! `node = base_index * fiber_count + fiber_index`.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{KrfError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    n_dims: usize,
    points: Vec<usize>,
    spacing: Vec<f64>,
    base_dims: usize,
    strides: Vec<usize>,
}

impl TorusGrid {
    /// Builds a periodic grid. Each axis needs at least 4 points and
    /// `1 <= base_dims <= n_dims`.
    pub fn new(n_dims: usize, points_per_dim: &[usize], base_dims: usize) -> Result<Self> {
        if n_dims == 0 {
            return Err(KrfError::config("dims", "must be at least 1"));
        }
        if points_per_dim.len() != n_dims {
            return Err(KrfError::config(
                "points",
                format!("expected {n_dims} entries, got {}", points_per_dim.len()),
            ));
        }
        if let Some((d, p)) = points_per_dim.iter().enumerate().find(|(_, &p)| p < 4) {
            return Err(KrfError::config(
                "points",
                format!("axis {d} has {p} points; at least 4 are required"),
            ));
        }
        if base_dims == 0 || base_dims > n_dims {
            return Err(KrfError::config(
                "kappa",
                format!("base dimension {base_dims} must lie in 1..={n_dims}"),
            ));
        }
        let spacing = points_per_dim
            .iter()
            .map(|&p| 2.0 * PI / p as f64)
            .collect();
        let mut strides = vec![1usize; n_dims];
        for d in (0..n_dims.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * points_per_dim[d + 1];
        }
        Ok(Self {
            n_dims,
            points: points_per_dim.to_vec(),
            spacing,
            base_dims,
            strides,
        })
    }

    /// Same number of points on every axis.
    pub fn uniform(n_dims: usize, points: usize, base_dims: usize) -> Result<Self> {
        Self::new(n_dims, &vec![points; n_dims], base_dims)
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn base_dims(&self) -> usize {
        self.base_dims
    }

    pub fn fiber_dims(&self) -> usize {
        self.n_dims - self.base_dims
    }

    pub fn node_count(&self) -> usize {
        self.points.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Number of nodes in one fiber (1 when the fiber is a point).
    pub fn fiber_count(&self) -> usize {
        self.points[self.base_dims..].iter().product()
    }

    pub fn base_count(&self) -> usize {
        self.points[..self.base_dims].iter().product()
    }

    pub fn base_index(&self, node: usize) -> usize {
        node / self.fiber_count()
    }

    pub fn fiber_index(&self, node: usize) -> usize {
        node % self.fiber_count()
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        (0..self.n_dims)
            .map(|d| (node / self.strides[d]) % self.points[d])
            .collect()
    }

    /// Flat index of a (possibly out-of-range) multi-index, wrapping each axis.
    pub fn wrap_index(&self, idx: &[isize]) -> usize {
        idx.iter()
            .zip(&self.points)
            .zip(&self.strides)
            .map(|((&i, &p), &s)| i.rem_euclid(p as isize) as usize * s)
            .sum()
    }

    /// Node reached by moving `step` cells along `axis`.
    pub fn shift(&self, node: usize, axis: usize, step: isize) -> usize {
        let p = self.points[axis] as isize;
        let i = ((node / self.strides[axis]) % self.points[axis]) as isize;
        let j = (i + step).rem_euclid(p);
        (node as isize + (j - i) * self.strides[axis] as isize) as usize
    }

    /// Node reached by an integer offset vector.
    pub fn offset(&self, node: usize, offset: &[isize]) -> usize {
        offset
            .iter()
            .enumerate()
            .fold(node, |acc, (d, &o)| if o == 0 { acc } else { self.shift(acc, d, o) })
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .zip(&self.spacing)
            .map(|(&i, &h)| i as f64 * h)
            .collect()
    }

    /// The grid of the first `base_dims` axes (a grid with `base_dims == n_dims`).
    pub fn base_grid(&self) -> TorusGrid {
        let k = self.base_dims;
        TorusGrid::new(k, &self.points[..k], k).expect("base axes are valid")
    }

    /// The grid of the fiber axes, or `None` when the fiber is a point.
    pub fn fiber_grid(&self) -> Option<TorusGrid> {
        let f = self.fiber_dims();
        (f > 0).then(|| TorusGrid::new(f, &self.points[self.base_dims..], f).expect("fiber axes are valid"))
    }

    pub fn fiber_cell_volume(&self) -> f64 {
        self.spacing[self.base_dims..].iter().product()
    }

    pub fn base_cell_volume(&self) -> f64 {
        self.spacing[..self.base_dims].iter().product()
    }

    /// Smallest spacing; the resolution used in error estimates.
    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Compensated (Neumaier) sum in index order. Independent of any chunking.
pub fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<TorusGrid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<TorusGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(KrfError::Argument(format!(
                "field has {} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(KrfError::Argument(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<TorusGrid>, value: f64) -> Self {
        let n = grid.node_count();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    /// Samples `f(y)` at every node.
    pub fn from_fn(grid: Arc<TorusGrid>, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let values = (0..grid.node_count())
            .into_par_iter()
            .map(|i| f(&grid.coords(i)))
            .collect();
        Self::new(grid, values)
    }

    pub(crate) fn from_values_unchecked(grid: Arc<TorusGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Integral with the rectangle rule.
    pub fn integral(&self) -> f64 {
        stable_sum(self.values.iter().cloned()) * self.grid.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        stable_sum(self.values.iter().cloned()) / self.values.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField::from_values_unchecked(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<ScalarField> {
        self.check_same_grid(other)?;
        Ok(ScalarField::from_values_unchecked(
            self.grid.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(KrfError::Argument("fields live on different grids".into()))
        }
    }

    /// Largest spread of values along any fiber (0 for fields pulled back from the base).
    pub fn fiber_variation(&self) -> f64 {
        let fc = self.grid.fiber_count();
        self.values
            .chunks(fc)
            .map(|fib| {
                let (lo, hi) = fib
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

/// One symmetric `n x n` matrix per node, stored densely (row-major per node).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    grid: Arc<TorusGrid>,
    dim: usize,
    data: Vec<f64>,
}

impl MetricField {
    pub fn zeros(grid: Arc<TorusGrid>, dim: usize) -> Self {
        let n = grid.node_count();
        Self {
            grid,
            dim,
            data: vec![0.0; n * dim * dim],
        }
    }

    /// Builds the field from per-node matrices, checking symmetry to `1e-12` relative.
    pub fn from_data(grid: Arc<TorusGrid>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.node_count() * dim * dim {
            return Err(KrfError::Argument("metric data has wrong length".into()));
        }
        let field = Self { grid, dim, data };
        for node in 0..field.grid.node_count() {
            let m = field.matrix(node);
            let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
            for i in 0..dim {
                for j in 0..i {
                    if (m[i * dim + j] - m[j * dim + i]).abs() > 1e-12 * scale {
                        return Err(KrfError::Argument(format!(
                            "matrix at node {node} is not symmetric"
                        )));
                    }
                }
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(KrfError::Argument(format!("non-finite matrix entry at node {node}")));
            }
        }
        Ok(field)
    }

    pub fn from_fn(grid: Arc<TorusGrid>, dim: usize, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let data: Vec<f64> = (0..grid.node_count())
            .into_par_iter()
            .flat_map_iter(|i| f(&grid.coords(i)))
            .collect();
        Self::from_data(grid, dim, data)
    }

    pub(crate) fn from_data_unchecked(grid: Arc<TorusGrid>, dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.node_count() * dim * dim);
        Self { grid, dim, data }
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self, node: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.data[node * s..(node + 1) * s]
    }

    pub fn matrix_mut(&mut self, node: usize) -> &mut [f64] {
        let s = self.dim * self.dim;
        &mut self.data[node * s..(node + 1) * s]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn entry(&self, node: usize, i: usize, j: usize) -> f64 {
        self.data[node * self.dim * self.dim + i * self.dim + j]
    }

    /// Entrywise `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &MetricField, b: f64) -> MetricField {
        debug_assert_eq!(self.data.len(), other.data.len());
        MetricField::from_data_unchecked(
            self.grid.clone(),
            self.dim,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
    }

    pub fn add(&self, other: &MetricField) -> MetricField {
        self.combine(1.0, other, 1.0)
    }

    pub fn scale(&self, a: f64) -> MetricField {
        MetricField::from_data_unchecked(self.grid.clone(), self.dim, self.data.iter().map(|v| a * v).collect())
    }

    /// Copies the upper-left `k x k` block of every matrix.
    pub fn leading_block(&self, k: usize) -> Vec<f64> {
        let n = self.dim;
        let mut out = Vec::with_capacity(self.grid.node_count() * k * k);
        for node in 0..self.grid.node_count() {
            let m = self.matrix(node);
            for i in 0..k {
                out.extend_from_slice(&m[i * n..i * n + k]);
            }
        }
        out
    }
}
