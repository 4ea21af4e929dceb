//! Random Gaussian sensing of sinogram columns.
//!
//! Every length-`n` sinogram column compresses to `m < n` measurements
//! through a fixed matrix `D` with i.i.d. `N(0, 1/m)` entries. Sampling is
//! keyed by a seed and a per-row stream so the matrix is reproducible and
//! independent of how many rows are filled in parallel.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec;

/// Measurement matrix `D` (`m × n`, entries i.i.d. `N(0, 1/m)`) plus the seed
/// that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingMatrix {
    pub d: Array2<f64>,
    pub seed: u64,
}

impl SensingMatrix {
    pub fn m(&self) -> usize {
        self.d.nrows()
    }

    pub fn n(&self) -> usize {
        self.d.ncols()
    }
}

/// Draw an `m × n` sensing matrix from the given seed.
///
/// Row `i` comes from an independent stream of a counter-based generator, so
/// the result is identical whether rows are sampled in sequence or in
/// parallel. Requires `0 < m < n`: at `m ≥ n` the encoding stops being a
/// compression and downstream recovery guarantees are void.
pub fn make_sensing_matrix(m: usize, n: usize, seed: u64) -> Result<SensingMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("sensing dims must be positive, got {m}×{n}")));
    }
    if m >= n {
        return Err(Error::Config(format!(
            "measurement count m={m} must be below signal length n={n}"
        )));
    }
    let sigma = (1.0 / m as f64).sqrt();
    let rows: Vec<Vec<f64>> = exec::map_collect(m, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
            .collect()
    });
    let mut d = Array2::<f64>::zeros((m, n));
    for (i, row) in rows.iter().enumerate() {
        d.row_mut(i).assign(&Array1::from_vec(row.clone()));
    }
    Ok(SensingMatrix { d, seed })
}

/// Compress one column: `x = D·a`.
pub fn encode_column(sensing: &SensingMatrix, a: ArrayView1<f64>) -> Result<Array1<f64>> {
    if a.len() != sensing.n() {
        return Err(Error::Domain(format!(
            "signal length {} does not match sensing width {}",
            a.len(),
            sensing.n()
        )));
    }
    Ok(sensing.d.dot(&a))
}

/// Compress every column of an `n × r` matrix into an `m × r` code matrix.
/// Column `j` of the result is bitwise what [`encode_column`] returns for
/// column `j` of the input (no batched-multiply reassociation).
pub fn encode(sensing: &SensingMatrix, columns: ArrayView2<f64>) -> Result<Array2<f64>> {
    if columns.nrows() != sensing.n() {
        return Err(Error::Domain(format!(
            "column length {} does not match sensing width {}",
            columns.nrows(),
            sensing.n()
        )));
    }
    let r = columns.ncols();
    let mut out = Array2::<f64>::zeros((sensing.m(), r));
    for j in 0..r {
        out.column_mut(j).assign(&sensing.d.dot(&columns.column(j)));
    }
    Ok(out)
}

/// Measurements sufficient for recovering `k`-sparse length-`n` signals:
/// `ceil(c · k · ln n)`, capped below `n` is *not* enforced here — callers
/// that need a strict compression must check against their `n`.
pub fn required_measurements(k: usize, n: usize, c: f64) -> Result<usize> {
    if k == 0 || n < 2 {
        return Err(Error::Config(format!(
            "sparsity bound needs k ≥ 1 and n ≥ 2, got k={k}, n={n}"
        )));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Config(format!("oversampling constant {c} must be positive")));
    }
    Ok((c * k as f64 * (n as f64).ln()).ceil() as usize)
}
