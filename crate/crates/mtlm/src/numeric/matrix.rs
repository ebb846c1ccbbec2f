use crate::error::{Error, Result};

/// Dense row-major matrix of f64. Column vectors are (n, 1) matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Column vector (n, 1).
    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Matrix { rows, cols: 1, data }
    }

    /// 1x1 matrix holding a single value.
    pub fn scalar(v: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 matrix.
    pub fn as_scalar(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Dimension(format!(
                "expected 1x1 matrix, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    /// Column c copied out as a (rows, 1) vector.
    pub fn col_vector(&self, c: usize) -> Result<Matrix> {
        if c >= self.cols {
            return Err(Error::Index(format!(
                "column {} of a {}x{} matrix",
                c, self.rows, self.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            out.push(self.get(r, c));
        }
        Ok(Matrix::column(out))
    }

    /// self * other, shapes (m,k)·(k,n) -> (m,n).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (l, &a_il) in a_row.iter().enumerate() {
                if a_il == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * n..(l + 1) * n];
                for (o, &b_lj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_il * b_lj;
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data: out }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += scale * other; shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add_scaled {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Numerically stable softmax over a slice: subtracts the max before
/// exponentiating so large logits do not overflow.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax over an empty slice".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Domain(format!("softmax over non-finite logits (max = {max})")));
    }
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= z;
    }
    Ok(out)
}

/// Probability floor used before taking logs, so a zero probability
/// yields a large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-30;

/// -ln p[target] with the probability clamped at `PROB_FLOOR`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::Index(format!(
            "cross_entropy target {} with {} classes",
            target,
            probs.len()
        )));
    }
    let p = probs[target].max(PROB_FLOOR);
    Ok(-p.ln())
}
