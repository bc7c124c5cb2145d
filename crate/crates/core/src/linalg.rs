//! Small dense helpers shared by the analysis modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigen_sorted(m).0.last().copied().unwrap_or(0.0)
}

pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigen_sorted(m).0.first().copied().unwrap_or(0.0)
}

/// Column-stacking vectorization.
pub fn vec_cols(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec_cols(v: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, v.len() / rows, v.as_slice())
}

/// Orthonormal bases of the range and kernel of `m` (columns), split at
/// singular values below `rel_tol * sigma_max`.
pub fn range_and_kernel(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    if cols == 0 || rows == 0 {
        return (DMatrix::zeros(rows, 0), DMatrix::identity(cols, cols));
    }
    let svd = m.clone().svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let top = svd.singular_values.iter().fold(0.0_f64, |a, s| a.max(*s));
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| top > 0.0 && svd.singular_values[i] > rel_tol * top)
        .collect();
    let range = select_columns(&u, &keep);
    let v_range = DMatrix::from_fn(cols, keep.len(), |r, c| v_t[(keep[c], r)]);
    // complement of the retained right singular vectors; the projector has
    // eigenvalues 0 and 1 only, so the split is unambiguous
    let proj = DMatrix::<f64>::identity(cols, cols) - &v_range * v_range.transpose();
    let (vals, vecs) = sym_eigen_sorted(&proj);
    let kernel_cols: Vec<usize> = (0..cols).filter(|&i| vals[i] > 0.5).collect();
    (range, select_columns(&vecs, &kernel_cols))
}

pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
pub fn pinv_psd(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let (vals, vecs) = sym_eigen_sorted(m);
    let top = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut out = DMatrix::zeros(n, n);
    if top == 0.0 {
        return out;
    }
    for (i, &v) in vals.iter().enumerate() {
        if v > rel_tol * top {
            let col = vecs.column(i);
            out += (col * col.transpose()) / v;
        }
    }
    out
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}
