//! Conservative discrete gradient/divergence pairs on uniform grids.
//!
//! A [`Stencil`] is a list of gradient elements. Each element carries a
//! quadrature weight, the index of the coefficient slot it reads, and one
//! forward difference per direction. The stiffness operator is
//! `K = Σ_e w_e G_eᵀ a_e G_e`, symmetric positive semidefinite whenever every
//! slot coefficient is.
//!
//! 1D: one element per face. 2D: every square of the staggered lattice is
//! split into its four corner triangles (weight `h²/4` each); for diagonal
//! coefficients this reduces to the five-point flux form.

use crate::fields::{CellGrid, FaceRule, MacroGrid, PeriodicMatrixField};
use crate::tensor::{unit, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Element {
    pub weight: f64,
    pub coef: u32,
    /// `(plus, minus)` node indices of the forward difference in each direction.
    pub pairs: [(u32, u32); 2],
}

#[derive(Clone, Debug)]
pub struct Stencil {
    pub dim: usize,
    pub h: f64,
    pub n: usize,
    pub elements: Vec<Element>,
    /// Location of every coefficient slot.
    pub coef_points: Vec<[f64; 2]>,
    /// Cell-stencil only: cells adjacent to each slot (arithmetic-mean rule).
    pub slot_cells: Vec<Vec<u32>>,
}

/// Corner triangles of a square with corners `c00, c10, c01, c11`
/// (first index along direction 1).
fn corner_triangles(c00: u32, c10: u32, c01: u32, c11: u32) -> [[(u32, u32); 2]; 4] {
    [
        [(c10, c00), (c01, c00)],
        [(c10, c00), (c11, c10)],
        [(c11, c01), (c01, c00)],
        [(c11, c01), (c11, c10)],
    ]
}

impl Stencil {
    /// Periodic stencil on the cell torus; unknowns live at cell centres.
    pub fn periodic_cell(dim: usize, m: usize) -> Self {
        let h = 1.0 / m as f64;
        let mut elements = Vec::new();
        let mut coef_points = Vec::new();
        let mut slot_cells = Vec::new();
        if dim == 1 {
            for i in 0..m {
                let ip = (i + 1) % m;
                elements.push(Element {
                    weight: h,
                    coef: i as u32,
                    pairs: [(ip as u32, i as u32), (0, 0)],
                });
                coef_points.push([(i + 1) as f64 * h, 0.0]);
                slot_cells.push(vec![i as u32, ip as u32]);
            }
        } else {
            let id = |i: usize, j: usize| ((i % m) * m + (j % m)) as u32;
            for i in 0..m {
                for j in 0..m {
                    let slot = (i * m + j) as u32;
                    let (c00, c10, c01, c11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
                    for pairs in corner_triangles(c00, c10, c01, c11) {
                        elements.push(Element {
                            weight: 0.25 * h * h,
                            coef: slot,
                            pairs,
                        });
                    }
                    coef_points.push([(i + 1) as f64 * h, (j + 1) as f64 * h]);
                    slot_cells.push(vec![c00, c10, c01, c11]);
                }
            }
        }
        Stencil {
            dim,
            h,
            n: m.pow(dim as u32),
            elements,
            coef_points,
            slot_cells,
        }
    }

    /// Stencil on all nodes of the macroscopic grid (boundary included);
    /// coefficients are sampled at edge midpoints (1D) or square centres (2D).
    pub fn dirichlet_macro(grid: &MacroGrid) -> Self {
        let m = grid.nodes_per_dir();
        let h = grid.h();
        let mut elements = Vec::new();
        let mut coef_points = Vec::new();
        if grid.dim == 1 {
            for i in 0..m - 1 {
                elements.push(Element {
                    weight: h,
                    coef: i as u32,
                    pairs: [((i + 1) as u32, i as u32), (0, 0)],
                });
                coef_points.push([(i as f64 + 0.5) * h, 0.0]);
            }
        } else {
            let id = |i: usize, j: usize| (i * m + j) as u32;
            for i in 0..m - 1 {
                for j in 0..m - 1 {
                    let slot = coef_points.len() as u32;
                    for pairs in corner_triangles(id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1)) {
                        elements.push(Element {
                            weight: 0.25 * h * h,
                            coef: slot,
                            pairs,
                        });
                    }
                    coef_points.push([(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]);
                }
            }
        }
        Stencil {
            dim: grid.dim,
            h,
            n: grid.n_nodes(),
            elements,
            coef_points,
            slot_cells: Vec::new(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.coef_points.len()
    }

    /// Volume of one unknown's control cell, `h^N`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Slot coefficients from values at cell centres (cell stencil only).
    pub fn slots_from_cells(&self, cell_values: &[Tensor]) -> Vec<Tensor> {
        self.slot_cells
            .iter()
            .map(|cells| {
                let mut acc = Tensor::zeros(self.dim);
                for &c in cells {
                    acc = acc + cell_values[c as usize];
                }
                acc * (1.0 / cells.len() as f64)
            })
            .collect()
    }

    /// Slot coefficients of `field` at time-slice `s` on a cell grid.
    pub fn cell_coefficients(&self, field: &PeriodicMatrixField, grid: &CellGrid, s: f64) -> Vec<Tensor> {
        match grid.face_rule {
            FaceRule::ArithmeticMean => {
                let cells: Vec<Tensor> = (0..self.n)
                    .map(|idx| field.eval(grid.point(self.dim, idx), s))
                    .collect();
                self.slots_from_cells(&cells)
            }
            FaceRule::Midpoint => self.coef_points.iter().map(|&y| field.eval(y, s)).collect(),
        }
    }

    #[inline]
    pub fn grad(&self, e: &Element, x: &[f64]) -> [f64; 2] {
        let inv_h = 1.0 / self.h;
        let mut g = [0.0; 2];
        for (d, gd) in g.iter_mut().enumerate().take(self.dim) {
            let (p, m) = e.pairs[d];
            *gd = (x[p as usize] - x[m as usize]) * inv_h;
        }
        g
    }

    #[inline]
    fn scatter(&self, e: &Element, q: [f64; 2], scale: f64, y: &mut [f64]) {
        let c = scale * e.weight / self.h;
        for (d, qd) in q.iter().enumerate().take(self.dim) {
            let (p, m) = e.pairs[d];
            y[p as usize] += c * qd;
            y[m as usize] -= c * qd;
        }
    }

    /// `y = K x`.
    pub fn apply(&self, coef: &[Tensor], x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        self.apply_add(coef, 1.0, x, y);
    }

    /// `y += scale · K x`.
    pub fn apply_add(&self, coef: &[Tensor], scale: f64, x: &[f64], y: &mut [f64]) {
        for e in &self.elements {
            let g = self.grad(e, x);
            let q = coef[e.coef as usize].apply(g);
            self.scatter(e, q, scale, y);
        }
    }

    /// `y = Σ_e w_e G_eᵀ q_e`, the weak divergence of an element flux.
    pub fn scatter_flux(&self, flux: &[[f64; 2]], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (e, q) in self.elements.iter().zip(flux) {
            self.scatter(e, *q, 1.0, y);
        }
    }

    /// Load vector `−Σ_e w_e G_eᵀ a_e e_k` of the cell problem in direction `k`.
    pub fn unit_load(&self, coef: &[Tensor], k: usize) -> Vec<f64> {
        let mut b = vec![0.0; self.n];
        let ek = unit(self.dim, k);
        for e in &self.elements {
            let q = coef[e.coef as usize].apply(ek);
            self.scatter(e, q, -1.0, &mut b);
        }
        b
    }

    /// `Σ_e w_e a_e (G_e x + e_k)`.
    pub fn flux_integral(&self, coef: &[Tensor], x: &[f64], k: usize) -> [f64; 2] {
        let mut acc = [0.0; 2];
        for e in &self.elements {
            let mut g = self.grad(e, x);
            g[k] += 1.0;
            let q = coef[e.coef as usize].apply(g);
            acc[0] += e.weight * q[0];
            acc[1] += e.weight * q[1];
        }
        acc
    }

    /// `Σ_e w_e |G_e x|²`, the discrete `‖∇x‖²`.
    pub fn grad_norm_sq(&self, x: &[f64]) -> f64 {
        self.elements
            .iter()
            .map(|e| {
                let g = self.grad(e, x);
                e.weight * (g[0] * g[0] + g[1] * g[1])
            })
            .sum()
    }

    /// `Σ_e w_e G_e x · G_e z`.
    pub fn grad_inner(&self, x: &[f64], z: &[f64]) -> f64 {
        self.elements
            .iter()
            .map(|e| {
                let g = self.grad(e, x);
                let f = self.grad(e, z);
                e.weight * (g[0] * f[0] + g[1] * f[1])
            })
            .sum()
    }

    /// `xᵀ K x`.
    pub fn energy(&self, coef: &[Tensor], x: &[f64]) -> f64 {
        self.elements
            .iter()
            .map(|e| {
                let g = self.grad(e, x);
                e.weight * coef[e.coef as usize].quad(g)
            })
            .sum()
    }

    /// Diagonal of `K`.
    pub fn diagonal(&self, coef: &[Tensor]) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        let c = 1.0 / (self.h * self.h);
        for e in &self.elements {
            let a = &coef[e.coef as usize];
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let (pi, mi) = e.pairs[i];
                    let (pj, mj) = e.pairs[j];
                    let v = e.weight * c * a.get(i, j);
                    // ∂/∂x_n of the (i,j) term for n ∈ {p, m}
                    for (node, si) in [(pi, 1.0), (mi, -1.0)] {
                        for (node2, sj) in [(pj, 1.0), (mj, -1.0)] {
                            if node == node2 {
                                d[node as usize] += v * si * sj;
                            }
                        }
                    }
                }
            }
        }
        d
    }

    /// Tridiagonal (cyclic entries folded in for the periodic case) of a 1D
    /// stencil: `(lower, diag, upper)` with `lower[i] = K[i][i-1]`,
    /// `upper[i] = K[i][i+1]`.
    pub fn tridiagonal(&self, coef: &[Tensor]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        assert_eq!(self.dim, 1);
        let n = self.n;
        let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let c = 1.0 / (self.h * self.h);
        for e in &self.elements {
            let (p, m) = e.pairs[0];
            let (p, m) = (p as usize, m as usize);
            let k = e.weight * c * coef[e.coef as usize].get(0, 0);
            di[p] += k;
            di[m] += k;
            up[m] -= k;
            lo[p] -= k;
        }
        (lo, di, up)
    }
}
