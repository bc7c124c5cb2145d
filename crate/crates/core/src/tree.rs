//! Discrete noise trees and the exact-adjoint forward/backward recursions.
//!
//! A tree of depth `K` replaces the `d`-dimensional Brownian motion on
//! `[0, T]`. Each node branches `b = s^d` ways, where `s` is the support size
//! of the one-step driver; the per-component increments have mean zero and
//! variance `Δ = T/K`. Nodes are stored breadth first, so the children of
//! node `j` are `b·j + 1 ..= b·j + b` and the nodes of depth `t` form one
//! contiguous block. Branch `β` of a node carries the support indices of
//! its components in lexicographic order, component 0 varying slowest.
//!
//! The backward recursion is the algebraic adjoint of the explicit Euler
//! forward step, so
//!
//! ```text
//! E<x_K, y_K> - <x_0, y_0> = Δ · sum_t E<u_t, z_t>
//! ```
//!
//! holds to rounding on every tree.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{HorizonConfig, StochasticSystem};

/// Default cap on the number of leaves `b^K`.
pub const DEFAULT_MAX_LEAVES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DriverKind {
    Bernoulli,
    Trinomial,
    QuantizedGaussian { levels: usize },
}

impl DriverKind {
    pub fn label(&self) -> String {
        match self {
            DriverKind::Bernoulli => "bernoulli".into(),
            DriverKind::Trinomial => "trinomial".into(),
            DriverKind::QuantizedGaussian { levels } => format!("quantized_gaussian({levels})"),
        }
    }

    /// Parses `bernoulli`, `trinomial`, `quantized_gaussian` or
    /// `quantized_gaussian(L)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "bernoulli" => Ok(DriverKind::Bernoulli),
            "trinomial" => Ok(DriverKind::Trinomial),
            "quantized_gaussian" => Ok(DriverKind::QuantizedGaussian { levels: 3 }),
            _ => {
                let levels = s
                    .strip_prefix("quantized_gaussian(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|r| r.trim().parse::<usize>().ok())
                    .ok_or_else(|| invalid(format!("unknown driver '{s}'")))?;
                Ok(DriverKind::QuantizedGaussian { levels })
            }
        }
    }
}

/// One-step increment law of a single noise component, in units of `√Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeDriver {
    pub kind: DriverKind,
    /// Support points with unit variance.
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TreeDriver {
    pub fn new(kind: DriverKind) -> Result<Self> {
        let (support, probs) = match kind {
            DriverKind::Bernoulli => (vec![-1.0, 1.0], vec![0.5, 0.5]),
            DriverKind::Trinomial => (
                vec![-3f64.sqrt(), 0.0, 3f64.sqrt()],
                vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            ),
            DriverKind::QuantizedGaussian { levels } => {
                if levels < 3 {
                    return Err(invalid("quantized_gaussian needs at least 3 levels"));
                }
                gauss_hermite(levels)
            }
        };
        Ok(Self {
            kind,
            support,
            probs,
        })
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }
}

/// Probabilists' Gauss–Hermite rule by Golub–Welsch, symmetrized and
/// renormalized so that the weights sum to one and the second moment is one.
fn gauss_hermite(levels: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(levels, levels, |r, c| {
        if r + 1 == c || c + 1 == r {
            (r.max(c) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..levels)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..levels / 2 {
        let j = levels - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if levels % 2 == 1 {
        nodes[levels / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let second: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
    let scale = second.sqrt();
    nodes.iter_mut().for_each(|x| *x /= scale);
    (nodes, weights)
}

/// A joint one-step branch: increment vector in `R^d` and its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub increment: Vec<f64>,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseTree {
    pub driver: TreeDriver,
    pub horizon: HorizonConfig,
    pub noise_dim: usize,
    branches: Vec<Branch>,
    parent: Vec<u32>,
    depth: Vec<u16>,
    branch_of: Vec<u32>,
    prob: Vec<f64>,
    offsets: Vec<usize>,
}

/// Enumerates the `s^d` joint branches, scaled to variance `dt`.
pub fn joint_branches(driver: &TreeDriver, noise_dim: usize, dt: f64) -> Vec<Branch> {
    let s = driver.support_size();
    let b = s.pow(noise_dim as u32);
    let root = dt.sqrt();
    (0..b)
        .map(|mut idx| {
            let mut increment = vec![0.0; noise_dim];
            let mut prob = 1.0;
            for comp in (0..noise_dim).rev() {
                let k = idx % s;
                idx /= s;
                increment[comp] = driver.support[k] * root;
                prob *= driver.probs[k];
            }
            Branch { increment, prob }
        })
        .collect()
}

pub fn build_tree(
    driver: &TreeDriver,
    horizon: HorizonConfig,
    noise_dim: usize,
) -> Result<NoiseTree> {
    build_tree_with_cap(driver, horizon, noise_dim, crate::budget::max_leaves())
}

pub fn build_tree_with_cap(
    driver: &TreeDriver,
    horizon: HorizonConfig,
    noise_dim: usize,
    max_leaves: usize,
) -> Result<NoiseTree> {
    if noise_dim == 0 {
        return Err(invalid("noise dimension must be positive"));
    }
    let s = driver.support_size();
    let b = s
        .checked_pow(noise_dim as u32)
        .filter(|b| *b <= max_leaves)
        .ok_or(Error::BudgetExceeded {
            what: "branching factor",
            size: usize::MAX,
            cap: max_leaves,
        })?;
    let leaves = b
        .checked_pow(horizon.k as u32)
        .ok_or(Error::BudgetExceeded {
            what: "leaf count",
            size: usize::MAX,
            cap: max_leaves,
        })?;
    if leaves > max_leaves {
        return Err(Error::BudgetExceeded {
            what: "leaf count",
            size: leaves,
            cap: max_leaves,
        });
    }

    let branches = joint_branches(driver, noise_dim, horizon.delta_t());
    let mut offsets = Vec::with_capacity(horizon.k + 2);
    let mut width = 1usize;
    let mut total = 0usize;
    for _ in 0..=horizon.k {
        offsets.push(total);
        total += width;
        width *= b;
    }
    offsets.push(total);

    let mut parent = vec![u32::MAX; total];
    let mut depth = vec![0u16; total];
    let mut branch_of = vec![u32::MAX; total];
    let mut prob = vec![0.0; total];
    prob[0] = 1.0;
    for t in 0..horizon.k {
        for j in offsets[t]..offsets[t + 1] {
            for (beta, br) in branches.iter().enumerate() {
                let child = b * j + 1 + beta;
                parent[child] = j as u32;
                depth[child] = (t + 1) as u16;
                branch_of[child] = beta as u32;
                prob[child] = prob[j] * br.prob;
            }
        }
    }

    Ok(NoiseTree {
        driver: driver.clone(),
        horizon,
        noise_dim,
        branches,
        parent,
        depth,
        branch_of,
        prob,
        offsets,
    })
}

impl NoiseTree {
    pub fn steps(&self) -> usize {
        self.horizon.k
    }

    pub fn dt(&self) -> f64 {
        self.horizon.delta_t()
    }

    pub fn branching(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn node_count(&self) -> usize {
        self.prob.len()
    }

    /// Number of nodes of depth `<= depth`.
    pub fn nodes_through(&self, depth: usize) -> usize {
        self.offsets[depth + 1]
    }

    pub fn internal_count(&self) -> usize {
        self.offsets[self.steps()]
    }

    pub fn leaf_count(&self) -> usize {
        self.node_count() - self.internal_count()
    }

    pub fn depth_range(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    pub fn leaf_range(&self) -> std::ops::Range<usize> {
        self.depth_range(self.steps())
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        (node != 0).then(|| self.parent[node] as usize)
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node] as usize
    }

    /// Branch index by which `node` was reached from its parent.
    pub fn branch_index(&self, node: usize) -> Option<usize> {
        (node != 0).then(|| self.branch_of[node] as usize)
    }

    pub fn child(&self, node: usize, branch: usize) -> usize {
        self.branching() * node + 1 + branch
    }

    pub fn prob(&self, node: usize) -> f64 {
        self.prob[node]
    }

    pub fn leaf_probs(&self) -> &[f64] {
        &self.prob[self.leaf_range()]
    }

    /// Probability of leaf number `leaf` (0-based among the leaves).
    pub fn leaf_prob(&self, leaf: usize) -> f64 {
        self.prob[self.internal_count() + leaf]
    }

    /// `E<a, b>` for two terminal variables.
    pub fn expect_inner(&self, a: &TerminalVariable, b: &TerminalVariable) -> f64 {
        let n = a.n;
        self.leaf_probs()
            .iter()
            .enumerate()
            .map(|(l, p)| {
                let (x, y) = (&a.values[l * n..(l + 1) * n], &b.values[l * n..(l + 1) * n]);
                p * x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>()
            })
            .sum()
    }

    /// `Δ · sum_t E|u_t|²` over the internal nodes.
    pub fn control_energy(&self, u: &AdaptedField) -> f64 {
        self.dt()
            * (0..self.internal_count())
                .map(|j| self.prob(j) * u.node(j).iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
    }

    /// `Δ · sum_t E<u_t, v_t>` over the internal nodes.
    pub fn control_inner(&self, u: &AdaptedField, v: &AdaptedField) -> f64 {
        self.dt()
            * (0..self.internal_count())
                .map(|j| {
                    self.prob(j)
                        * u.node(j)
                            .iter()
                            .zip(v.node(j))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .sum::<f64>()
    }

    /// Probability-weighted sums of the node probabilities per depth.
    pub fn depth_mass(&self, t: usize) -> f64 {
        self.depth_range(t).map(|j| self.prob[j]).sum()
    }
}

/// One vector per node for every node of depth `<= depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    pub dim: usize,
    pub depth: usize,
    pub values: Vec<f64>,
}

impl AdaptedField {
    pub fn zeros(tree: &NoiseTree, dim: usize, depth: usize) -> Self {
        Self {
            dim,
            depth,
            values: vec![0.0; tree.nodes_through(depth) * dim],
        }
    }

    /// Field on the internal nodes, the shape of a control.
    pub fn control_zeros(tree: &NoiseTree, dim: usize) -> Self {
        Self::zeros(tree, dim, tree.steps() - 1)
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn node_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn len_nodes(&self) -> usize {
        self.values.len() / self.dim.max(1)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &AdaptedField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// Restriction of a full field to its leaf layer.
    pub fn leaf_layer(&self, tree: &NoiseTree) -> TerminalVariable {
        assert_eq!(self.depth, tree.steps(), "field does not reach the leaves");
        let r = tree.leaf_range();
        TerminalVariable {
            n: self.dim,
            values: self.values[r.start * self.dim..r.end * self.dim].to_vec(),
        }
    }

    /// CSV with columns `node,depth,v0,...`, breadth-first node order.
    pub fn write_csv<W: Write>(&self, tree: &NoiseTree, mut w: W) -> std::io::Result<()> {
        write!(w, "node,depth")?;
        for k in 0..self.dim {
            write!(w, ",v{k}")?;
        }
        writeln!(w)?;
        for j in 0..self.len_nodes() {
            write!(w, "{j},{}", tree.depth(j))?;
            for v in self.node(j) {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Little-endian binary: `u64 nodes, u64 dim`, then per node
    /// `u64 index, u64 depth, dim × f64`.
    pub fn write_binary<W: Write>(&self, tree: &NoiseTree, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.len_nodes() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for j in 0..self.len_nodes() {
            w.write_all(&(j as u64).to_le_bytes())?;
            w.write_all(&(tree.depth(j) as u64).to_le_bytes())?;
            for v in self.node(j) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Leaf-indexed vectors in `R^n`, leaf-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalVariable {
    pub n: usize,
    pub values: Vec<f64>,
}

impl TerminalVariable {
    pub fn zeros(tree: &NoiseTree, n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; tree.leaf_count() * n],
        }
    }

    /// The same vector on every leaf.
    pub fn constant(tree: &NoiseTree, v: &[f64]) -> Self {
        Self {
            n: v.len(),
            values: v
                .iter()
                .copied()
                .cycle()
                .take(tree.leaf_count() * v.len())
                .collect(),
        }
    }

    pub fn from_fn(tree: &NoiseTree, n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(tree.leaf_count() * n);
        for l in 0..tree.leaf_count() {
            for k in 0..n {
                values.push(f(l, k));
            }
        }
        Self { n, values }
    }

    pub fn leaf(&self, l: usize) -> &[f64] {
        &self.values[l * self.n..(l + 1) * self.n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &TerminalVariable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    pub fn write_csv<W: Write>(&self, tree: &NoiseTree, mut w: W) -> std::io::Result<()> {
        write!(w, "leaf,node")?;
        for k in 0..self.n {
            write!(w, ",v{k}")?;
        }
        writeln!(w)?;
        let base = tree.internal_count();
        for l in 0..tree.leaf_count() {
            write!(w, "{l},{}", base + l)?;
            for v in self.leaf(l) {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Row-major copies of the coefficients for allocation-free node kernels.
#[derive(Debug, Clone)]
pub(crate) struct Coeffs {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub dd: Vec<Vec<f64>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Coeffs {
    pub fn new(sys: &StochasticSystem) -> Self {
        Self {
            n: sys.n,
            m: sys.m,
            d: sys.noise_dim,
            a: row_major(&sys.a),
            b: row_major(&sys.b),
            c: sys.c.iter().map(row_major).collect(),
            dd: sys.d.iter().map(row_major).collect(),
        }
    }
}

/// `out += s · M x` for row-major `M` (`rows × cols`).
#[inline]
fn gemv(out: &mut [f64], mat: &[f64], cols: usize, x: &[f64], s: f64) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &mat[r * cols..(r + 1) * cols];
        *o += s * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += s · M^T x` for row-major `M` (`rows × cols`), `out` of length `cols`.
#[inline]
fn gemv_t(out: &mut [f64], mat: &[f64], cols: usize, x: &[f64], s: f64) {
    for (r, xr) in x.iter().enumerate() {
        let row = &mat[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += s * a * xr;
        }
    }
}

fn check_system(tree: &NoiseTree, sys: &StochasticSystem) -> Result<()> {
    if sys.noise_dim != tree.noise_dim {
        return Err(invalid(format!(
            "system noise dimension {} does not match tree dimension {}",
            sys.noise_dim, tree.noise_dim
        )));
    }
    Ok(())
}

/// Euler forward recursion on the tree:
/// `x_child = x + (A x + B u) Δ + sum_i (C_i x + D_i u) ξ_i`.
///
/// `u = None` means the zero control.
pub fn simulate_forward(
    tree: &NoiseTree,
    sys: &StochasticSystem,
    x0: &[f64],
    u: Option<&AdaptedField>,
) -> Result<AdaptedField> {
    check_system(tree, sys)?;
    if x0.len() != sys.n {
        return Err(invalid("x0 has the wrong dimension"));
    }
    if let Some(u) = u {
        if u.dim != sys.m || u.len_nodes() < tree.internal_count() {
            return Err(invalid(
                "control field must cover every internal node with dimension m",
            ));
        }
    }
    let co = Coeffs::new(sys);
    let mut x = AdaptedField::zeros(tree, sys.n, tree.steps());
    x.node_mut(0).copy_from_slice(x0);
    forward_into(tree, &co, u, &mut x.values);
    Ok(x)
}

pub(crate) fn forward_into(tree: &NoiseTree, co: &Coeffs, u: Option<&AdaptedField>, x: &mut [f64]) {
    let (n, m) = (co.n, co.m);
    let dt = tree.dt();
    let zero_u = vec![0.0; m];
    let mut drift = vec![0.0; n];
    let mut diff = vec![vec![0.0; n]; co.d];
    let bsz = tree.branching();
    for j in 0..tree.internal_count() {
        let (head, tail) = x.split_at_mut((bsz * j + 1) * n);
        let xj = &head[j * n..(j + 1) * n];
        let uj = u.map_or(&zero_u[..], |u| u.node(j));
        drift.copy_from_slice(xj);
        gemv(&mut drift, &co.a, n, xj, dt);
        gemv(&mut drift, &co.b, m, uj, dt);
        for i in 0..co.d {
            diff[i].iter_mut().for_each(|v| *v = 0.0);
            gemv(&mut diff[i], &co.c[i], n, xj, 1.0);
            gemv(&mut diff[i], &co.dd[i], m, uj, 1.0);
        }
        for (beta, br) in tree.branches().iter().enumerate() {
            let child = &mut tail[beta * n..(beta + 1) * n];
            child.copy_from_slice(&drift);
            for (i, xi) in br.increment.iter().enumerate() {
                for (cv, dv) in child.iter_mut().zip(&diff[i]) {
                    *cv += dv * xi;
                }
            }
        }
    }
}

/// Adapted triple of the discrete dual equation.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// `y` on every node; equals the terminal variable on the leaves.
    pub y: AdaptedField,
    /// `Y_1..Y_d` on the internal nodes.
    pub big_y: Vec<AdaptedField>,
    /// Output `z = B^T m_1 + sum D_i^T Y_i` on the internal nodes.
    pub z: AdaptedField,
}

impl BackwardSolution {
    pub fn y0(&self) -> &[f64] {
        self.y.node(0)
    }
}

/// Backward recursion at each internal node with children `β`:
///
/// ```text
/// m1  = sum_β p_β y_β
/// Y_i = (1/Δ) sum_β p_β ξ_{β,i} y_β
/// y   = m1 + Δ (A^T m1 + sum_i C_i^T Y_i)
/// z   = B^T m1 + sum_i D_i^T Y_i
/// ```
pub fn solve_bsde(
    tree: &NoiseTree,
    sys: &StochasticSystem,
    y1: &TerminalVariable,
) -> Result<BackwardSolution> {
    check_system(tree, sys)?;
    if y1.n != sys.n || y1.values.len() != tree.leaf_count() * sys.n {
        return Err(invalid(
            "terminal variable does not match the tree and system",
        ));
    }
    if !y1.is_finite() {
        return Err(invalid("terminal variable has non-finite entries"));
    }
    let co = Coeffs::new(sys);
    let mut y = AdaptedField::zeros(tree, sys.n, tree.steps());
    let mut big_y: Vec<AdaptedField> = (0..sys.noise_dim)
        .map(|_| AdaptedField::control_zeros(tree, sys.n))
        .collect();
    let mut z = AdaptedField::control_zeros(tree, sys.m);
    let leaf0 = tree.internal_count() * sys.n;
    y.values[leaf0..].copy_from_slice(&y1.values);
    backward_into(tree, &co, &mut y.values, Some(&mut big_y), &mut z.values);
    Ok(BackwardSolution { y, big_y, z })
}

pub(crate) fn backward_into(
    tree: &NoiseTree,
    co: &Coeffs,
    y: &mut [f64],
    mut big_y: Option<&mut Vec<AdaptedField>>,
    z: &mut [f64],
) {
    let (n, m) = (co.n, co.m);
    let dt = tree.dt();
    let bsz = tree.branching();
    let mut m1 = vec![0.0; n];
    let mut yy = vec![vec![0.0; n]; co.d];
    for j in (0..tree.internal_count()).rev() {
        let (head, tail) = y.split_at_mut((bsz * j + 1) * n);
        m1.iter_mut().for_each(|v| *v = 0.0);
        yy.iter_mut()
            .for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
        for (beta, br) in tree.branches().iter().enumerate() {
            let child = &tail[beta * n..(beta + 1) * n];
            for (acc, c) in m1.iter_mut().zip(child) {
                *acc += br.prob * c;
            }
            for (i, xi) in br.increment.iter().enumerate() {
                let w = br.prob * xi / dt;
                for (acc, c) in yy[i].iter_mut().zip(child) {
                    *acc += w * c;
                }
            }
        }
        let yj = &mut head[j * n..(j + 1) * n];
        yj.copy_from_slice(&m1);
        gemv_t(yj, &co.a, n, &m1, dt);
        let zj = &mut z[j * m..(j + 1) * m];
        zj.iter_mut().for_each(|v| *v = 0.0);
        gemv_t(zj, &co.b, m, &m1, 1.0);
        for i in 0..co.d {
            gemv_t(yj, &co.c[i], n, &yy[i], dt);
            gemv_t(zj, &co.dd[i], m, &yy[i], 1.0);
        }
        if let Some(fields) = big_y.as_deref_mut() {
            for i in 0..co.d {
                fields[i].node_mut(j).copy_from_slice(&yy[i]);
            }
        }
    }
}

/// `|E<x_K, y_1> - <x0, y_0> - Δ sum_t E<u_t, z_t>|`.
pub fn duality_residual(
    tree: &NoiseTree,
    sys: &StochasticSystem,
    u: Option<&AdaptedField>,
    x0: &[f64],
    y1: &TerminalVariable,
) -> Result<f64> {
    let x = simulate_forward(tree, sys, x0, u)?;
    let back = solve_bsde(tree, sys, y1)?;
    let terminal = tree.expect_inner(&x.leaf_layer(tree), y1);
    let initial: f64 = x0.iter().zip(back.y0()).map(|(a, b)| a * b).sum();
    let control = u.map_or(0.0, |u| tree.control_inner(u, &back.z));
    Ok((terminal - initial - control).abs())
}

/// `E|x(T; 0, x0)|²` on the tree.
pub fn tree_second_moment(tree: &NoiseTree, sys: &StochasticSystem, x0: &[f64]) -> Result<f64> {
    let x = simulate_forward(tree, sys, x0, None)?.leaf_layer(tree);
    Ok(tree.expect_inner(&x, &x))
}

/// Tight discrete growth constant `λ_max(S_0)` with `S_K = I` and
/// `S_t = sum_β p_β M_β^T S_{t+1} M_β`, `M_β = I + AΔ + sum_i C_i ξ_{β,i}`.
pub fn tree_growth_constant(tree: &NoiseTree, sys: &StochasticSystem) -> Result<f64> {
    check_system(tree, sys)?;
    let n = sys.n;
    let dt = tree.dt();
    let step: Vec<(f64, DMatrix<f64>)> = tree
        .branches()
        .iter()
        .map(|br| {
            let mut mb = DMatrix::<f64>::identity(n, n) + &sys.a * dt;
            for (c, xi) in sys.c.iter().zip(&br.increment) {
                mb += c * *xi;
            }
            (br.prob, mb)
        })
        .collect();
    let mut s = DMatrix::<f64>::identity(n, n);
    for _ in 0..tree.steps() {
        let mut next = DMatrix::zeros(n, n);
        for (p, mb) in &step {
            next += mb.transpose() * &s * mb * *p;
        }
        s = crate::linalg::symmetrize(&next);
    }
    Ok(crate::linalg::lambda_max_sym(&s))
}
