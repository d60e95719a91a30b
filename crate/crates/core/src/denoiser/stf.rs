//! Fixed-weight reference of the spatial-temporal fusion block and the
//! association score head.
//!
//! Each query produces a dynamic pair of projections `P1 (d x h)` and
//! `P2 (h x d)` from one linear layer. The RoI features of both frames are
//! stacked along the RoI axis (`2R x d`), pushed through `P1` then `P2`, and
//! flattened into a second linear layer that returns a `d`-vector. The same
//! weights run in both directions. There are no biases or activations, so the
//! block is linear in the features for a fixed query.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_ROI: usize = 49;
pub const DEFAULT_DIM: usize = 16;
/// Inner width of the dynamic projections.
pub const DEFAULT_HIDDEN: usize = 4;

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StfWeights {
    pub roi: usize,
    pub dim: usize,
    pub hidden: usize,
    /// `(2 d h) x d`: query to the flattened `P1` and `P2`.
    pub linear1: DMatrix<f64>,
    /// `d x (2 R d)`: flattened fused features to the output query.
    pub linear2: DMatrix<f64>,
}

impl StfWeights {
    pub fn seeded(roi: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            roi,
            dim,
            hidden,
            linear1: xavier(2 * dim * hidden, dim, &mut rng),
            linear2: xavier(dim, 2 * roi * dim, &mut rng),
        }
    }

    pub fn reference(seed: u64) -> Self {
        Self::seeded(DEFAULT_ROI, DEFAULT_DIM, DEFAULT_HIDDEN, seed)
    }

    /// Fuses one query with the RoI features of its own frame (`own`) and the
    /// other frame (`other`).
    fn fuse_one(&self, own: &DMatrix<f64>, other: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
        let (d, h, r) = (self.dim, self.hidden, self.roi);
        let params = &self.linear1 * q;
        let p1 = DMatrix::from_row_slice(d, h, &params.as_slice()[..d * h]);
        let p2 = DMatrix::from_row_slice(h, d, &params.as_slice()[d * h..]);
        let mut cat = DMatrix::zeros(2 * r, d);
        cat.rows_mut(0, r).copy_from(own);
        cat.rows_mut(r, r).copy_from(other);
        let feat = cat * p1 * p2;
        // Row-major flatten of the 2R x d block.
        let flat = DVector::from_iterator(2 * r * d, feat.transpose().iter().copied());
        &self.linear2 * flat
    }
}

fn check_features(name: &str, f: &[DMatrix<f64>], n: usize, w: &StfWeights) -> Result<()> {
    if f.len() != n {
        return Err(Error::Shape(format!("{name}: {} RoI blocks for {n} queries", f.len())));
    }
    if let Some(bad) = f.iter().find(|m| m.shape() != (w.roi, w.dim)) {
        return Err(Error::Shape(format!(
            "{name}: RoI block is {:?}, expected {:?}",
            bad.shape(),
            (w.roi, w.dim)
        )));
    }
    Ok(())
}

/// Runs the fusion in both directions. Features are `N` blocks of `R x d`,
/// queries are `N x d`. Returns the fused previous and current queries.
pub fn stf_fuse(
    f_prev: &[DMatrix<f64>],
    f_cur: &[DMatrix<f64>],
    q_prev: &DMatrix<f64>,
    q_cur: &DMatrix<f64>,
    w: &StfWeights,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = q_prev.nrows();
    for (name, q) in [("q_prev", q_prev), ("q_cur", q_cur)] {
        if q.shape() != (n, w.dim) {
            return Err(Error::Shape(format!("{name} is {:?}, expected {:?}", q.shape(), (n, w.dim))));
        }
    }
    check_features("f_prev", f_prev, n, w)?;
    check_features("f_cur", f_cur, n, w)?;
    let mut out_prev = DMatrix::zeros(n, w.dim);
    let mut out_cur = DMatrix::zeros(n, w.dim);
    for i in 0..n {
        let qp = q_prev.row(i).transpose();
        let qc = q_cur.row(i).transpose();
        out_prev.set_row(i, &w.fuse_one(&f_prev[i], &f_cur[i], &qp).transpose());
        out_cur.set_row(i, &w.fuse_one(&f_cur[i], &f_prev[i], &qc).transpose());
    }
    Ok((out_prev, out_cur))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationHead {
    /// Length `2 d`: weights on the concatenated fused queries.
    pub weights: DVector<f64>,
    pub bias: f64,
}

impl AssociationHead {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: xavier(2 * dim, 1, &mut rng).column(0).into_owned(),
            bias: 0.0,
        }
    }

    /// Sigmoid of a linear map on `[fused_prev | fused_cur]`, one score per row.
    pub fn score(&self, fused_prev: &DMatrix<f64>, fused_cur: &DMatrix<f64>) -> Result<Vec<f64>> {
        let d = self.weights.len() / 2;
        if !self.weights.len().is_multiple_of(2) || fused_prev.shape() != fused_cur.shape() || fused_prev.ncols() != d {
            return Err(Error::Shape(format!(
                "head of width {} cannot score {:?} and {:?}",
                self.weights.len(),
                fused_prev.shape(),
                fused_cur.shape()
            )));
        }
        let (wp, wc) = (self.weights.rows(0, d), self.weights.rows(d, d));
        Ok((0..fused_prev.nrows())
            .map(|i| {
                let z = fused_prev.row(i).dot(&wp.transpose()) + fused_cur.row(i).dot(&wc.transpose()) + self.bias;
                1.0 / (1.0 + (-z).exp())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    type Inputs = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>, DMatrix<f64>);

    fn random_inputs(n: usize, seed: u64) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = || DMatrix::from_fn(DEFAULT_ROI, DEFAULT_DIM, |_, _| rng.random_range(-1.0..1.0));
        let fp: Vec<_> = (0..n).map(|_| block()).collect();
        let fc: Vec<_> = (0..n).map(|_| block()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let qp = DMatrix::from_fn(n, DEFAULT_DIM, |_, _| rng.random_range(-1.0..1.0));
        let qc = DMatrix::from_fn(n, DEFAULT_DIM, |_, _| rng.random_range(-1.0..1.0));
        (fp, fc, qp, qc)
    }

    #[test]
    fn output_shapes() {
        let w = StfWeights::reference(0);
        let (fp, fc, qp, qc) = random_inputs(4, 1);
        let (a, b) = stf_fuse(&fp, &fc, &qp, &qc, &w).unwrap();
        assert_eq!(a.shape(), (4, 16));
        assert_eq!(b.shape(), (4, 16));
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let w = StfWeights::reference(0);
        let z = vec![DMatrix::zeros(DEFAULT_ROI, DEFAULT_DIM); 3];
        let q = DMatrix::zeros(3, DEFAULT_DIM);
        let (a, b) = stf_fuse(&z, &z, &q, &q, &w).unwrap();
        assert!(a.iter().chain(b.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn swapping_frames_swaps_outputs() {
        let w = StfWeights::reference(5);
        let (fp, fc, qp, qc) = random_inputs(3, 2);
        let (a, b) = stf_fuse(&fp, &fc, &qp, &qc, &w).unwrap();
        let (a2, b2) = stf_fuse(&fc, &fp, &qc, &qp, &w).unwrap();
        assert_abs_diff_eq!(a, b2, epsilon = 1e-12);
        assert_abs_diff_eq!(b, a2, epsilon = 1e-12);
    }

    #[test]
    fn output_depends_on_both_frames() {
        let w = StfWeights::reference(7);
        let (fp, fc, qp, qc) = random_inputs(2, 3);
        let (a, b) = stf_fuse(&fp, &fc, &qp, &qc, &w).unwrap();
        for (r, c) in [(0, 0), (10, 5), (48, 15)] {
            let mut fc2 = fc.clone();
            fc2[0][(r, c)] += 1.0;
            let (a2, b2) = stf_fuse(&fp, &fc2, &qp, &qc, &w).unwrap();
            assert!((a2.row(0) - a.row(0)).norm() > 1e-9);
            assert!((b2.row(0) - b.row(0)).norm() > 1e-9);
            assert_abs_diff_eq!(a2.row(1), a.row(1));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = StfWeights::reference(0);
        let (fp, fc, qp, qc) = random_inputs(4, 1);
        assert!(stf_fuse(&fp[..3], &fc, &qp, &qc, &w).is_err());
        let narrow = DMatrix::zeros(4, 8);
        assert!(stf_fuse(&fp, &fc, &narrow, &qc, &w).is_err());
        let bad = vec![DMatrix::zeros(10, DEFAULT_DIM); 4];
        assert!(stf_fuse(&bad, &fc, &qp, &qc, &w).is_err());
    }

    #[test]
    fn head_scores() {
        let head = AssociationHead::seeded(DEFAULT_DIM, 11);
        let zero = DMatrix::zeros(5, DEFAULT_DIM);
        assert!(head.score(&zero, &zero).unwrap().iter().all(|s| *s == 0.5));

        let (_, _, qp, qc) = random_inputs(6, 4);
        let scores = head.score(&(qp.clone() * 50.0), &(qc.clone() * 50.0)).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));

        let perm = [3, 0, 5, 1, 4, 2];
        let pp = DMatrix::from_fn(6, DEFAULT_DIM, |i, j| qp[(perm[i], j)]);
        let pc = DMatrix::from_fn(6, DEFAULT_DIM, |i, j| qc[(perm[i], j)]);
        let base = head.score(&qp, &qc).unwrap();
        let permuted = head.score(&pp, &pc).unwrap();
        for i in 0..6 {
            assert_eq!(permuted[i], base[perm[i]]);
        }
        assert!(head.score(&qp, &DMatrix::zeros(5, DEFAULT_DIM)).is_err());
    }
}
