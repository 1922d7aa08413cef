//! Real Schur decomposition with eigenvalue reordering.
//!
//! `nalgebra` provides the unordered quasi-triangular form `M = Z T Zᵀ`. The
//! reordering here swaps adjacent diagonal blocks by solving the small
//! Sylvester equation `T11 X − X T22 = T12` and rotating the window with the
//! orthogonal factor of `[−X; I]`, so that a chosen group of eigenvalues ends
//! up in the leading columns of `Z`.

use nalgebra::Schur;

use super::{linear::LinearSolver, Matrix, Vector};
use crate::error::{Error, Result};

/// One diagonal block of the quasi-triangular factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub start: usize,
    pub size: usize,
    /// Real part of the block's eigenvalue(s).
    pub re: f64,
    /// Absolute imaginary part (zero for 1×1 blocks).
    pub im: f64,
}

#[derive(Clone, Debug)]
pub struct OrderedSchur {
    pub z: Matrix,
    pub t: Matrix,
    blocks: Vec<Block>,
}

impl OrderedSchur {
    pub fn new(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch("Schur form needs a square matrix".into()));
        }
        let n = m.nrows();
        let schur = Schur::try_new(m.clone(), 1e-15, 2000 * n.max(10)).ok_or(Error::EigenFailure)?;
        let (z, t) = schur.unpack();
        let mut out = Self {
            z,
            t,
            blocks: Vec::new(),
        };
        out.standardize();
        Ok(out)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Detects the block structure, splitting 2×2 blocks that carry real
    /// eigenvalues into two 1×1 blocks.
    fn standardize(&mut self) {
        let n = self.t.nrows();
        let mut i = 0;
        while i < n {
            if i + 1 < n && self.is_coupled(i) {
                let (a, b, c, d) = (
                    self.t[(i, i)],
                    self.t[(i, i + 1)],
                    self.t[(i + 1, i)],
                    self.t[(i + 1, i + 1)],
                );
                let half = 0.5 * (a - d);
                let disc = half * half + b * c;
                if disc >= 0.0 {
                    let root = disc.sqrt();
                    let mean = 0.5 * (a + d);
                    let lambda = if half >= 0.0 { mean + root } else { mean - root };
                    let (mut x, mut y) = (b, lambda - a);
                    if x.abs() + y.abs() < (lambda - d).abs() + c.abs() {
                        x = lambda - d;
                        y = c;
                    }
                    let norm = x.hypot(y);
                    if norm > 0.0 {
                        self.rotate(i, x / norm, y / norm);
                    }
                    self.t[(i + 1, i)] = 0.0;
                    i += 1;
                    continue;
                }
                i += 2;
            } else {
                if i + 1 < n {
                    self.t[(i + 1, i)] = 0.0;
                }
                i += 1;
            }
        }
        // Everything below the first subdiagonal is structurally zero.
        for j in 0..n {
            for r in (j + 2)..n {
                self.t[(r, j)] = 0.0;
            }
        }
        self.rebuild_blocks();
    }

    fn is_coupled(&self, i: usize) -> bool {
        let sub = self.t[(i + 1, i)].abs();
        let scale = self.t[(i, i)].abs() + self.t[(i + 1, i + 1)].abs();
        sub > 1e-14 * scale.max(1e-300) && sub > 0.0
    }

    /// Applies the Givens rotation whose first column is `(cs, sn)` to rows and
    /// columns `i, i+1`.
    fn rotate(&mut self, i: usize, cs: f64, sn: f64) {
        let n = self.t.nrows();
        for j in 0..n {
            let (x, y) = (self.t[(i, j)], self.t[(i + 1, j)]);
            self.t[(i, j)] = cs * x + sn * y;
            self.t[(i + 1, j)] = -sn * x + cs * y;
        }
        for r in 0..n {
            let (x, y) = (self.t[(r, i)], self.t[(r, i + 1)]);
            self.t[(r, i)] = cs * x + sn * y;
            self.t[(r, i + 1)] = -sn * x + cs * y;
            let (x, y) = (self.z[(r, i)], self.z[(r, i + 1)]);
            self.z[(r, i)] = cs * x + sn * y;
            self.z[(r, i + 1)] = -sn * x + cs * y;
        }
    }

    fn rebuild_blocks(&mut self) {
        let n = self.t.nrows();
        self.blocks.clear();
        let mut i = 0;
        while i < n {
            if i + 1 < n && self.t[(i + 1, i)] != 0.0 {
                self.blocks.push(self.block_at(i, 2));
                i += 2;
            } else {
                self.blocks.push(self.block_at(i, 1));
                i += 1;
            }
        }
    }

    fn block_at(&self, start: usize, size: usize) -> Block {
        if size == 1 {
            return Block {
                start,
                size,
                re: self.t[(start, start)],
                im: 0.0,
            };
        }
        let (a, b, c, d) = (
            self.t[(start, start)],
            self.t[(start, start + 1)],
            self.t[(start + 1, start)],
            self.t[(start + 1, start + 1)],
        );
        let half = 0.5 * (a - d);
        let disc = half * half + b * c;
        Block {
            start,
            size,
            re: 0.5 * (a + d),
            im: (-disc).max(0.0).sqrt(),
        }
    }

    /// Swaps the diagonal blocks `k` and `k + 1`.
    fn swap_adjacent(&mut self, k: usize) -> Result<()> {
        let b1 = self.blocks[k];
        let b2 = self.blocks[k + 1];
        let (p, q, j) = (b1.size, b2.size, b1.start);
        let w = p + q;

        let t11 = self.t.view((j, j), (p, p)).into_owned();
        let t22 = self.t.view((j + p, j + p), (q, q)).into_owned();
        let t12 = self.t.view((j, j + p), (p, q)).into_owned();

        // (I_q ⊗ T11 − T22ᵀ ⊗ I_p) vec(X) = vec(T12), column-major vec.
        let mut kron = Matrix::zeros(p * q, p * q);
        for c in 0..q {
            for r in 0..p {
                let row = r + c * p;
                for s in 0..p {
                    kron[(row, s + c * p)] += t11[(r, s)];
                }
                for s in 0..q {
                    kron[(row, r + s * p)] -= t22[(s, c)];
                }
            }
        }
        let rhs = Vector::from_iterator(p * q, (0..q).flat_map(|c| (0..p).map(move |r| (r, c))).map(|(r, c)| t12[(r, c)]));
        let x = LinearSolver::factor(&kron)?.solve(&rhs)?;

        // Orthonormal basis whose leading q columns span [−X; I_q].
        let mut aug = Matrix::zeros(w, q + w);
        for c in 0..q {
            for r in 0..p {
                aug[(r, c)] = -x[r + c * p];
            }
            aug[(p + c, c)] = 1.0;
        }
        for i in 0..w {
            aug[(i, q + i)] = 1.0;
        }
        let qmat = aug.qr().q();

        let rows = self.t.rows(j, w).into_owned();
        self.t.rows_mut(j, w).copy_from(&(qmat.transpose() * rows));
        let cols = self.t.columns(j, w).into_owned();
        self.t.columns_mut(j, w).copy_from(&(cols * &qmat));
        let zc = self.z.columns(j, w).into_owned();
        self.z.columns_mut(j, w).copy_from(&(zc * &qmat));

        let scale = self.t.view((j, j), (w, w)).amax().max(1e-300);
        let leak = self.t.view((j + q, j), (p, q)).amax();
        if leak > 1e-8 * scale {
            return Err(Error::EigenFailure);
        }
        self.t.view_mut((j + q, j), (p, q)).fill(0.0);

        let first = Block {
            start: j,
            ..self.block_at(j, q)
        };
        let second = Block {
            start: j + q,
            ..self.block_at(j + q, p)
        };
        self.blocks[k] = first;
        self.blocks[k + 1] = second;
        Ok(())
    }

    /// Stable-sorts the blocks in ascending order of `key`. Blocks whose keys
    /// differ by at most `tie` keep their relative order.
    pub fn sort_by_key<F: Fn(&Block) -> f64>(&mut self, key: F, tie: f64) -> Result<()> {
        let nb = self.blocks.len();
        for pass in 0..nb {
            let mut swapped = false;
            for k in 0..nb.saturating_sub(1 + pass) {
                if key(&self.blocks[k]) > key(&self.blocks[k + 1]) + tie {
                    self.swap_adjacent(k)?;
                    swapped = true;
                }
            }
            if !swapped {
                break;
            }
        }
        Ok(())
    }

    /// Leading `k` Schur vectors, provided the split does not cut a 2×2 block.
    pub fn leading_basis(&self, k: usize) -> Option<Matrix> {
        let mut acc = 0;
        for b in &self.blocks {
            if acc == k {
                break;
            }
            acc += b.size;
            if acc > k {
                return None;
            }
        }
        (acc == k).then(|| self.z.columns(0, k).into_owned())
    }
}
