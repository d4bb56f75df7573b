//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sorted_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
pub fn psd_sqrt(m: &Mat) -> Mat {
    let n = m.nrows();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut out = Mat::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out += (v * v.transpose()) * lambda.sqrt();
    }
    symmetrize(&out)
}

/// Projects a symmetric matrix onto the PSD cone by zeroing negative eigenvalues.
pub fn clamp_psd(m: &Mat) -> Mat {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut out = Mat::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) * lambda;
        }
    }
    symmetrize(&out)
}

/// Ratio of extreme eigenvalues of a symmetric matrix (∞ when singular).
pub fn condition_number(m: &Mat) -> f64 {
    let ev = sorted_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix with relative cutoff.
pub fn psd_pinv(m: &Mat, rel_cutoff: f64) -> Mat {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut out = Mat::zeros(n, n);
    if top <= 0.0 {
        return out;
    }
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > rel_cutoff * top {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    symmetrize(&out)
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Serde adapter writing matrices as `{rows, cols, data}` with row-major data.
pub mod row_major {
    use super::Mat;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct MatrixRepr {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl From<&Mat> for MatrixRepr {
        fn from(m: &Mat) -> Self {
            let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
            MatrixRepr { rows: m.nrows(), cols: m.ncols(), data }
        }
    }

    impl MatrixRepr {
        pub fn to_matrix(&self) -> Result<Mat, String> {
            if self.data.len() != self.rows * self.cols {
                return Err(format!(
                    "matrix declares {}x{} but carries {} entries",
                    self.rows,
                    self.cols,
                    self.data.len()
                ));
            }
            Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
        }
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        MatrixRepr::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        MatrixRepr::deserialize(d)?.to_matrix().map_err(D::Error::custom)
    }
}

/// Serde adapter writing vectors as plain JSON arrays.
pub mod plain_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_reconstructs_psd_matrix() {
        let m = Mat::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let s = psd_sqrt(&m);
        assert!(max_abs_diff(&(&s * &s), &m) < 1e-12);
    }

    #[test]
    fn sqrt_of_singular_matrix() {
        let v = Vector::from_vec(vec![1.0, 2.0]);
        let m = &v * v.transpose();
        let s = psd_sqrt(&m);
        assert!(max_abs_diff(&(&s * &s), &m) < 1e-12);
        assert!(min_eigenvalue(&m).abs() < 1e-12);
    }

    #[test]
    fn pinv_inverts_on_range() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = psd_pinv(&m, 1e-12);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn row_major_json() {
        #[derive(serde::Serialize, serde::Deserialize)]
        struct W(#[serde(with = "row_major")] Mat);
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let text = serde_json::to_string(&W(m.clone())).unwrap();
        assert_eq!(text, r#"{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}"#);
        assert_eq!(serde_json::from_str::<W>(&text).unwrap().0, m);
        assert!(serde_json::from_str::<W>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }

    #[test]
    fn block_diag_layout() {
        let b = block_diag(&[Mat::identity(1, 1), Mat::from_element(2, 2, 3.0)]);
        assert_eq!(b.shape(), (3, 3));
        assert_eq!(b[(0, 1)], 0.0);
        assert_eq!(b[(2, 2)], 3.0);
    }
}
