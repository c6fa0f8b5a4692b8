//! Dense row-major tensors.
//!
//! Shapes are explicit extent lists. There is no implicit broadcasting; the
//! only broadcast-like operations are the dedicated row/channel bias ops on
//! the graph, which keeps every shape decision visible at the call site.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from an extent list and row-major data.
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Contract {
                op: "Tensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// A rank-1 singleton, used for scalar losses.
    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds a rank-2 tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::Contract {
                    op: "Tensor::from_rows",
                    expected: format!("rows of length {c}"),
                    got: format!("{}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Extent pair of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(TensorError::Contract {
                op: "Tensor::dims2",
                expected: "rank 2".into(),
                got: format!("rank {} ({:?})", self.rank(), self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        debug_assert!(self.rank() >= 1);
        let cols: usize = self.shape[1..].iter().product();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Converts element-wise between precisions. f32 -> f64 is exact, so a
    /// widen/narrow round trip reproduces the original bits.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Per-row indices of the k largest entries of a rank-2 tensor.
///
/// Ties prefer the lower index; each returned row is sorted ascending so the
/// result reads as an index set. k must satisfy 1 <= k <= columns.
pub fn topk_rows<F: Scalar>(t: &Tensor<F>, k: usize) -> Result<Vec<Vec<usize>>> {
    let (rows, cols) = t.dims2()?;
    if k == 0 || k > cols {
        return Err(TensorError::Contract {
            op: "topk_rows",
            expected: format!("1 <= k <= {cols}"),
            got: format!("k = {k}"),
        });
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = t.row(r);
        let mut idx: Vec<usize> = (0..cols).collect();
        // Stable sort by descending value keeps lower indices first on ties.
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        idx.truncate(k);
        idx.sort_unstable();
        out.push(idx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent selection oracle: repeatedly scan for the maximum,
    /// preferring the lower index on ties.
    fn topk_oracle(row: &[f64], k: usize) -> Vec<usize> {
        let mut taken = vec![false; row.len()];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for (i, &v) in row.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) => {
                        if v > row[b] {
                            best = Some(i);
                        }
                    }
                }
            }
            taken[best.unwrap()] = true;
        }
        (0..row.len()).filter(|&i| taken[i]).collect()
    }

    #[test]
    fn topk_picks_largest_with_low_index_ties() {
        let t = Tensor::from_rows(&[vec![0.5f64, -0.2, 0.9, 0.1]]).unwrap();
        assert_eq!(topk_rows(&t, 2).unwrap(), vec![vec![0, 2]]);

        // Tie between equal values: index 1 wins over index 3.
        let t = Tensor::from_rows(&[vec![0.0f64, 0.7, 0.2, 0.7]]).unwrap();
        assert_eq!(topk_rows(&t, 1).unwrap(), vec![vec![1]]);
    }

    #[test]
    fn topk_matches_scan_oracle_on_random_rows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let cols = rng.gen_range(1..12);
            let k = rng.gen_range(1..=cols);
            // Coarse values force frequent ties.
            let row: Vec<f64> = (0..cols).map(|_| rng.gen_range(-3..=3) as f64 * 0.5).collect();
            let t = Tensor::from_rows(&[row.clone()]).unwrap();
            assert_eq!(topk_rows(&t, k).unwrap()[0], topk_oracle(&row, k));
        }
    }

    #[test]
    fn topk_rejects_bad_k() {
        let t = Tensor::from_rows(&[vec![1.0f64, 2.0]]).unwrap();
        assert!(topk_rows(&t, 0).is_err());
        assert!(topk_rows(&t, 3).is_err());
    }

    #[test]
    fn new_rejects_wrong_element_count() {
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("6 elements") && msg.contains("5"), "{msg}");
    }

    #[test]
    fn cast_round_trip_is_exact_for_f32() {
        let t = Tensor::<f32>::from_rows(&[vec![0.1, -2.5e-8, 3.0e7]]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
