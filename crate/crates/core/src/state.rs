use std::ops::Range;

use nalgebra::DVectorView;

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Block layout of the stacked vector `x = (u, c, λ, μ)` for `m` edges and
/// `n` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub m: usize,
    pub n: usize,
}

impl Layout {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    pub fn dim(&self) -> usize {
        3 * self.m + self.n
    }

    pub fn u(&self) -> Range<usize> {
        0..self.m
    }

    pub fn c(&self) -> Range<usize> {
        self.m..2 * self.m
    }

    pub fn lambda(&self) -> Range<usize> {
        2 * self.m..2 * self.m + self.n
    }

    pub fn mu(&self) -> Range<usize> {
        2 * self.m + self.n..self.dim()
    }

    /// Indicator of the capacity block.
    pub fn c_indicator(&self) -> Vector {
        let mut v = Vector::zeros(self.dim());
        v.rows_mut(self.m, self.m).fill(1.0);
        v
    }

    /// Clamps the sign-constrained blocks `u`, `c`, `μ` to the nonnegative orthant.
    pub fn project(&self, x: &mut Vector) {
        for r in [self.u(), self.c(), self.mu()] {
            for i in r {
                if x[i] < 0.0 {
                    x[i] = 0.0;
                }
            }
        }
    }

    /// True for indices in `u`, `c` or `μ`.
    pub fn is_constrained(&self, i: usize) -> bool {
        i < 2 * self.m || i >= 2 * self.m + self.n
    }
}

/// A stacked primal-dual state stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedState {
    layout: Layout,
    data: Vector,
}

impl StackedState {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            data: Vector::zeros(layout.dim()),
        }
    }

    pub fn from_vector(layout: Layout, data: Vector) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(Error::DimensionMismatch(format!(
                "stacked state has length {}, layout needs {}",
                data.len(),
                layout.dim()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn from_blocks(layout: Layout, u: &Vector, c: &Vector, lambda: &Vector, mu: &Vector) -> Result<Self> {
        if u.len() != layout.m || c.len() != layout.m || mu.len() != layout.m || lambda.len() != layout.n {
            return Err(Error::DimensionMismatch("block lengths do not match the layout".into()));
        }
        let mut data = Vector::zeros(layout.dim());
        data.rows_mut(0, layout.m).copy_from(u);
        data.rows_mut(layout.m, layout.m).copy_from(c);
        data.rows_mut(2 * layout.m, layout.n).copy_from(lambda);
        data.rows_mut(2 * layout.m + layout.n, layout.m).copy_from(mu);
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn as_vector(&self) -> &Vector {
        &self.data
    }

    pub fn as_vector_mut(&mut self) -> &mut Vector {
        &mut self.data
    }

    pub fn into_vector(self) -> Vector {
        self.data
    }

    fn block(&self, r: Range<usize>) -> DVectorView<'_, f64> {
        self.data.rows(r.start, r.len())
    }

    pub fn u(&self) -> DVectorView<'_, f64> {
        self.block(self.layout.u())
    }

    pub fn c(&self) -> DVectorView<'_, f64> {
        self.block(self.layout.c())
    }

    pub fn lambda(&self) -> DVectorView<'_, f64> {
        self.block(self.layout.lambda())
    }

    pub fn mu(&self) -> DVectorView<'_, f64> {
        self.block(self.layout.mu())
    }

    pub fn project(&mut self) {
        self.layout.project(&mut self.data);
    }

    /// True when `u`, `c`, `μ` are all nonnegative.
    pub fn is_projected(&self) -> bool {
        (0..self.layout.dim()).all(|i| !self.layout.is_constrained(i) || self.data[i] >= 0.0)
    }
}
