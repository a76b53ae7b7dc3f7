//! Dense multi-mode tensors of `f64` in row-major order (last mode fastest),
//! with the contractions consumed by the dictionary-learning solvers: mode
//! products, leading contractions, contract-all-but-one-mode, CP outer
//! products, mode insertion, and vectorization.
//!
//! One memory convention is used everywhere: `vectorize`, the matricized
//! ground cost, and `contract_leading` all agree on row-major flattening, so
//! results can be cross-checked against plain matrix algebra.

use crate::{CoreError, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use std::io::{Read, Write};
use std::path::Path;

/// 1-based mode index, matching the usual tensor-algebra subscripts.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Mode(pub usize);

impl Mode {
    /// Validates against a tensor with `ndim` modes and returns the 0-based axis.
    fn axis(self, ndim: usize) -> Result<usize> {
        if self.0 == 0 || self.0 > ndim {
            return Err(CoreError::Dimension(format!(
                "mode {} out of range for a {}-mode tensor",
                self.0, ndim
            )));
        }
        Ok(self.0 - 1)
    }
}

/// Dense multi-mode array with explicit shape; data is row-major, last mode
/// fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(CoreError::Dimension(format!(
                "every mode size must be >= 1, got {shape:?}"
            )));
        }
        if product(&shape) != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                product(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = product(&shape);
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = product(&shape);
        Tensor::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let flat = self.flat_index(index);
        self.data[flat] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.ndim());
        let mut flat = 0;
        for (i, (&ix, &sz)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < sz, "index {ix} out of range at mode {}", i + 1);
            flat = flat * sz + ix;
        }
        flat
    }

    /// Reinterprets the entries under a new shape with the same length.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Flat copy with a single mode, in the library-wide row-major order.
    pub fn vectorize(&self) -> Tensor {
        Tensor {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    /// Contiguous `(rows, cols)` matrix view; requires `rows * cols == len`.
    pub fn as_mat(&self, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        debug_assert_eq!(rows * cols, self.data.len());
        ArrayView2::from_shape((rows, cols), &self.data).expect("contiguous row-major view")
    }

    pub fn frob_dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(CoreError::Dimension(format!(
                "inner product needs equal sizes, got {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    /// `self + alpha * other`, elementwise.
    pub fn add_scaled(&self, alpha: f64, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::Dimension(format!(
                "elementwise op on mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + alpha * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Mode-k tensor-matrix product (Kolda–Bader convention):
    /// `out[.., j, ..] = sum_i T[.., i, ..] * m[j, i]` along mode `k`.
    pub fn mode_product(&self, m: &Tensor, k: Mode) -> Result<Tensor> {
        let axis = k.axis(self.ndim())?;
        if m.ndim() != 2 {
            return Err(CoreError::Dimension(format!(
                "mode-{} factor must be a matrix, got {} modes",
                k.0,
                m.ndim()
            )));
        }
        let (j_rows, i_cols) = (m.shape[0], m.shape[1]);
        if i_cols != self.shape[axis] {
            return Err(CoreError::Dimension(format!(
                "mode {} has size {} but factor expects {}",
                k.0, self.shape[axis], i_cols
            )));
        }
        let pre: usize = product(&self.shape[..axis]);
        let mid = self.shape[axis];
        let post: usize = product(&self.shape[axis + 1..]);

        let mut out_shape = self.shape.clone();
        out_shape[axis] = j_rows;
        let mut out = vec![0.0; pre * j_rows * post];
        let m_view = m.as_mat(j_rows, i_cols);
        for a in 0..pre {
            let src = ArrayView2::from_shape((mid, post), &self.data[a * mid * post..][..mid * post])
                .expect("contiguous slab");
            let mut dst = ArrayViewMut2::from_shape(
                (j_rows, post),
                &mut out[a * j_rows * post..][..j_rows * post],
            )
            .expect("contiguous slab");
            general_mat_mul(1.0, &m_view, &src, 0.0, &mut dst);
        }
        Tensor::new(out_shape, out)
    }

    /// Contraction over the leading modes shared with `g`:
    /// `self` has shape `(I_1..I_d, r)` and `g` has shape `(I_1..I_d)` or
    /// `(I_1..I_d, N)`; the result is `(r)` or `(r, N)` with
    /// `out[j, i] = sum over leading indices of self[.., j] * g[.., i]`.
    pub fn contract_leading(&self, g: &Tensor) -> Result<Tensor> {
        let d = self.ndim() - 1;
        if self.ndim() < 2 {
            return Err(CoreError::Dimension(
                "contract_leading needs at least 2 modes on the dictionary".into(),
            ));
        }
        let (lead_g, trailing) = if g.ndim() == d {
            (&g.shape[..], None)
        } else if g.ndim() == d + 1 {
            (&g.shape[..d], Some(g.shape[d]))
        } else {
            return Err(CoreError::Dimension(format!(
                "contract_leading: operand has {} modes, expected {} or {}",
                g.ndim(),
                d,
                d + 1
            )));
        };
        for (i, (&a, &b)) in self.shape[..d].iter().zip(lead_g).enumerate() {
            if a != b {
                return Err(CoreError::Dimension(format!(
                    "contract_leading: mode {} sizes differ ({a} vs {b})",
                    i + 1
                )));
            }
        }
        let p: usize = product(&self.shape[..d]);
        let r = self.shape[d];
        let n = trailing.unwrap_or(1);
        let d_mat = self.as_mat(p, r);
        let g_mat = g.as_mat(p, n);
        let mut out = vec![0.0; r * n];
        {
            let mut dst = ArrayViewMut2::from_shape((r, n), &mut out).expect("contiguous");
            general_mat_mul(1.0, &d_mat.t(), &g_mat, 0.0, &mut dst);
        }
        let shape = match trailing {
            Some(n) => vec![r, n],
            None => vec![r],
        };
        Tensor::new(shape, out)
    }

    /// Contraction of `self` (playing G, shaped `(I_1..I_d, N)`) with `lbar`
    /// (shaped like G except holding `r` at mode `k`) over every mode except
    /// `k`. The result `(I_k, r)` is the adjoint of `U -> lbar x_k U`:
    /// `<lbar x_k U, G> = <U, G x_{!=k} lbar>` for all `U`.
    pub fn contract_except(&self, lbar: &Tensor, k: Mode) -> Result<Tensor> {
        if self.ndim() != lbar.ndim() {
            return Err(CoreError::Dimension(format!(
                "contract_except: operands have {} and {} modes",
                self.ndim(),
                lbar.ndim()
            )));
        }
        let axis = k.axis(self.ndim())?;
        for i in 0..self.ndim() {
            if i != axis && self.shape[i] != lbar.shape[i] {
                return Err(CoreError::Dimension(format!(
                    "contract_except: mode {} sizes differ ({} vs {})",
                    i + 1,
                    self.shape[i],
                    lbar.shape[i]
                )));
            }
        }
        let ik = self.shape[axis];
        let r = lbar.shape[axis];
        let pre: usize = product(&self.shape[..axis]);
        let post: usize = product(&self.shape[axis + 1..]);

        let mut out = vec![0.0; ik * r];
        let mut dst = ArrayViewMut2::from_shape((ik, r), &mut out).expect("contiguous");
        for a in 0..pre {
            let g_a = ArrayView2::from_shape((ik, post), &self.data[a * ik * post..][..ik * post])
                .expect("contiguous slab");
            let l_a = ArrayView2::from_shape((r, post), &lbar.data[a * r * post..][..r * post])
                .expect("contiguous slab");
            let beta = if a == 0 { 0.0 } else { 1.0 };
            general_mat_mul(1.0, &g_a, &l_a.t(), beta, &mut dst);
        }
        drop(dst);
        Tensor::new(vec![ik, r], out)
    }

    /// Moves the last mode to position `k` (1-based), shifting the others
    /// right. Pure index permutation; `extract_mode` is its inverse.
    pub fn insert_mode(&self, k: Mode) -> Result<Tensor> {
        let m = self.ndim();
        if m < 2 {
            return Err(CoreError::Dimension(
                "insert_mode needs at least 2 modes".into(),
            ));
        }
        let axis = k.axis(m)?;
        // Source axis j lands at destination axis: j < axis -> j; last -> axis;
        // otherwise j + 1.
        let dest_axis = |j: usize| {
            if j == m - 1 {
                axis
            } else if j < axis {
                j
            } else {
                j + 1
            }
        };
        self.permuted(dest_axis)
    }

    /// Moves mode `k` (1-based) to the last position; inverse of `insert_mode`.
    pub fn extract_mode(&self, k: Mode) -> Result<Tensor> {
        let m = self.ndim();
        if m < 2 {
            return Err(CoreError::Dimension(
                "extract_mode needs at least 2 modes".into(),
            ));
        }
        let axis = k.axis(m)?;
        let dest_axis = |j: usize| {
            if j == axis {
                m - 1
            } else if j < axis {
                j
            } else {
                j - 1
            }
        };
        self.permuted(dest_axis)
    }

    fn permuted(&self, dest_axis: impl Fn(usize) -> usize) -> Result<Tensor> {
        let m = self.ndim();
        let mut out_shape = vec![0usize; m];
        for j in 0..m {
            out_shape[dest_axis(j)] = self.shape[j];
        }
        let out_strides = strides_of(&out_shape);
        // Destination stride seen from each source axis.
        let dstride: Vec<usize> = (0..m).map(|j| out_strides[dest_axis(j)]).collect();
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; m];
        let mut dflat = 0usize;
        for &v in &self.data {
            out[dflat] = v;
            // Increment the source multi-index (last mode fastest), tracking
            // the destination flat offset.
            for j in (0..m).rev() {
                idx[j] += 1;
                dflat += dstride[j];
                if idx[j] < self.shape[j] {
                    break;
                }
                dflat -= idx[j] * dstride[j];
                idx[j] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Tensor binary format: magic `WTNSR1`, u32 LE mode count, u32 LE mode
    /// sizes, then the row-major f64 LE payload.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"WTNSR1")?;
        w.write_all(&(self.ndim() as u32).to_le_bytes())?;
        for &s in &self.shape {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != b"WTNSR1" {
            return Err(CoreError::Format(format!(
                "bad magic bytes {:?}, expected WTNSR1",
                magic
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let ndim = u32::from_le_bytes(buf4) as usize;
        if ndim == 0 || ndim > 64 {
            return Err(CoreError::Format(format!("implausible mode count {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let n = product(&shape);
        let mut data = Vec::with_capacity(n);
        let mut buf8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_binary(&mut f)
    }

    /// CSV export for 1- and 2-mode tensors: one row per leading index.
    /// Floats are printed in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        match self.ndim() {
            1 => {
                for &v in &self.data {
                    writeln!(w, "{v}")?;
                }
            }
            2 => {
                let cols = self.shape[1];
                for row in self.data.chunks(cols) {
                    let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                    writeln!(w, "{}", line.join(","))?;
                }
            }
            n => {
                return Err(CoreError::Format(format!(
                    "CSV export handles 1- and 2-mode tensors, got {n} modes"
                )))
            }
        }
        Ok(())
    }

    /// CSV import; a single-column file yields a 1-mode tensor, otherwise the
    /// result has 2 modes.
    pub fn read_csv<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| {
                CoreError::Format(format!("CSV line {}: {e}", lineno + 1))
            })?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(CoreError::Format(format!(
                        "CSV line {}: expected {} fields, got {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CoreError::Format("empty CSV".into()));
        }
        let cols = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if cols == 1 {
            let n = data.len();
            Tensor::new(vec![n], data)
        } else {
            let n = data.len() / cols;
            Tensor::new(vec![n, cols], data)
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for j in (0..shape.len().saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * shape[j + 1];
    }
    strides
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Outer product of loading matrices: given d factors `U^(k)` of shape
/// `(I_k, r)`, returns the `(I_1..I_d, r)` tensor whose slice `[.., j]` is the
/// outer product of the j-th columns. With a single factor this is a copy.
pub fn cp_outer(factors: &[&Tensor]) -> Result<Tensor> {
    if factors.is_empty() {
        return Err(CoreError::Dimension("cp_outer needs at least one factor".into()));
    }
    for (i, f) in factors.iter().enumerate() {
        if f.ndim() != 2 {
            return Err(CoreError::Dimension(format!(
                "cp_outer factor {} must be a matrix, got {} modes",
                i + 1,
                f.ndim()
            )));
        }
    }
    let r = factors[0].shape()[1];
    for (i, f) in factors.iter().enumerate() {
        if f.shape()[1] != r {
            return Err(CoreError::Dimension(format!(
                "cp_outer factor {} has {} columns, expected {r}",
                i + 1,
                f.shape()[1]
            )));
        }
    }
    let mut acc = factors[0].data().to_vec();
    let mut rows = factors[0].shape()[0];
    let mut shape = vec![rows];
    for f in &factors[1..] {
        let ik = f.shape()[0];
        let mut next = vec![0.0; rows * ik * r];
        for a in 0..rows {
            for i in 0..ik {
                let dst = &mut next[(a * ik + i) * r..][..r];
                let lhs = &acc[a * r..][..r];
                let rhs = &f.data()[i * r..][..r];
                for j in 0..r {
                    dst[j] = lhs[j] * rhs[j];
                }
            }
        }
        acc = next;
        rows *= ik;
        shape.push(ik);
    }
    shape.push(r);
    Tensor::new(shape, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Naive triple-loop mode product used as the oracle.
    fn mode_product_naive(t: &Tensor, m: &Tensor, k: usize) -> Tensor {
        let axis = k - 1;
        let (j_rows, i_cols) = (m.shape()[0], m.shape()[1]);
        assert_eq!(i_cols, t.shape()[axis]);
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = j_rows;
        let mut out = Tensor::zeros(out_shape).unwrap();
        let mut idx = vec![0usize; t.ndim()];
        loop {
            let mut sum_idx = idx.clone();
            for j in 0..j_rows {
                sum_idx[axis] = j;
                let mut s = 0.0;
                for i in 0..i_cols {
                    let mut src = idx.clone();
                    src[axis] = i;
                    s += t.get(&src) * m.get(&[j, i]);
                }
                out.set(&sum_idx, s);
            }
            // advance over all axes except `axis`
            let mut done = true;
            for j in (0..t.ndim()).rev() {
                if j == axis {
                    continue;
                }
                idx[j] += 1;
                if idx[j] < t.shape()[j] {
                    done = false;
                    break;
                }
                idx[j] = 0;
            }
            if done {
                break;
            }
        }
        out
    }

    #[test]
    fn mode_product_identity_leaves_tensor_unchanged() {
        let mut r = rng(1);
        let t = random_tensor(&[3, 4, 2], &mut r);
        for k in 1..=3 {
            let n = t.shape()[k - 1];
            let mut eye = Tensor::zeros(vec![n, n]).unwrap();
            for i in 0..n {
                eye.set(&[i, i], 1.0);
            }
            let out = t.mode_product(&eye, Mode(k)).unwrap();
            assert_eq!(out, t);
        }
    }

    #[test]
    fn mode_product_small_known_case() {
        // rows (1,2),(3,4); sum along mode 2 gives (3, 7)
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let out = t.mode_product(&a, Mode(2)).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn mode_product_matches_naive_loops() {
        let mut r = rng(2);
        for shape in [vec![2, 3], vec![2, 2, 3], vec![3, 2, 4, 2]] {
            for k in 1..=shape.len() {
                let t = random_tensor(&shape, &mut r);
                let m = random_tensor(&[3, shape[k - 1]], &mut r);
                let fast = t.mode_product(&m, Mode(k)).unwrap();
                let slow = mode_product_naive(&t, &m, k);
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mode_product_concatenation_semantics() {
        // D in R^{2x2x3} against a (4,3) factor on mode 3 equals the per-column sums.
        let mut r = rng(3);
        let d = random_tensor(&[2, 2, 3], &mut r);
        let lam = random_tensor(&[4, 3], &mut r);
        let out = d.mode_product(&lam, Mode(3)).unwrap();
        for i in 0..4 {
            for a in 0..2 {
                for b in 0..2 {
                    let mut s = 0.0;
                    for j in 0..3 {
                        s += d.get(&[a, b, j]) * lam.get(&[i, j]);
                    }
                    assert!((out.get(&[a, b, i]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mode_product_shape_mismatch_is_an_error() {
        let t = Tensor::zeros(vec![2, 3]).unwrap();
        let m = Tensor::zeros(vec![2, 4]).unwrap();
        let err = t.mode_product(&m, Mode(2)).unwrap_err();
        assert!(matches!(err, CoreError::Dimension(_)));
        assert!(err.to_string().contains("mode 2"));
    }

    #[test]
    fn contract_leading_matches_vectorized_products() {
        let mut r = rng(4);
        let d = random_tensor(&[2, 2, 3], &mut r);
        let g = random_tensor(&[2, 2], &mut r);
        let out = d.contract_leading(&g).unwrap();
        assert_eq!(out.shape(), &[3]);
        let dv = d.as_mat(4, 3);
        let gv = g.vectorize();
        for j in 0..3 {
            let expect: f64 = (0..4).map(|p| dv[[p, j]] * gv.data()[p]).sum();
            assert!((out.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn contract_leading_single_atom_is_inner_product() {
        let mut r = rng(5);
        let g = random_tensor(&[3, 2], &mut r);
        let d = g.reshape(vec![3, 2, 1]).unwrap();
        let out = d.contract_leading(&g).unwrap();
        assert!((out.data()[0] - g.norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn contract_leading_zero_input_gives_zero() {
        let mut r = rng(6);
        let d = random_tensor(&[2, 3, 4], &mut r);
        let g = Tensor::zeros(vec![2, 3, 5]).unwrap();
        let out = d.contract_leading(&g).unwrap();
        assert_eq!(out.shape(), &[4, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contract_except_adjoint_identity() {
        // <lbar x_k U, G> == <U, contract_except(G, lbar, k)> on random input.
        let mut r = rng(7);
        for k in 1..=2usize {
            let rr = 2;
            let mut gshape = vec![2, 3, 2]; // (I1, I2, N)
            let mut lshape = gshape.clone();
            lshape[k - 1] = rr;
            let g = random_tensor(&gshape, &mut r);
            let lbar = random_tensor(&lshape, &mut r);
            let u = random_tensor(&[gshape[k - 1], rr], &mut r);
            let lhs = lbar
                .mode_product(&u, Mode(k))
                .unwrap()
                .frob_dot(&g)
                .unwrap();
            let rhs = g
                .contract_except(&lbar, Mode(k))
                .unwrap()
                .frob_dot(&u)
                .unwrap();
            assert!((lhs - rhs).abs() < 1e-12, "k={k}: {lhs} vs {rhs}");
            gshape.rotate_left(0); // keep clippy quiet about unused mut pattern
        }
    }

    #[test]
    fn contract_except_zero_and_allones_cases() {
        let mut r = rng(8);
        let lbar = Tensor::filled(vec![1, 3, 2], 1.0).unwrap();
        let g0 = Tensor::zeros(vec![4, 3, 2]).unwrap();
        let out0 = g0.contract_except(&lbar, Mode(1)).unwrap();
        assert!(out0.data().iter().all(|&v| v == 0.0));

        // r = 1, lbar of ones: out[i_k, 1] sums G over all other indices.
        let g = random_tensor(&[4, 3, 2], &mut r);
        let out = g.contract_except(&lbar, Mode(1)).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..3 {
                for n in 0..2 {
                    s += g.get(&[i, j, n]);
                }
            }
            assert!((out.get(&[i, 0]) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn cp_outer_degenerate_and_small_cases() {
        let u = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let out = cp_outer(&[&u]).unwrap();
        assert_eq!(out, u);

        let v = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let atom = cp_outer(&[&u, &v]).unwrap();
        assert_eq!(atom.shape(), &[2, 2, 1]);
        assert_eq!(atom.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn cp_outer_of_uniform_columns_is_uniform_joint() {
        let u = Tensor::filled(vec![4, 2], 0.25).unwrap();
        let v = Tensor::filled(vec![5, 2], 0.2).unwrap();
        let atoms = cp_outer(&[&u, &v]).unwrap();
        for &x in atoms.data() {
            assert!((x - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cp_outer_rank_mismatch_is_an_error() {
        let u = Tensor::zeros(vec![2, 2]).unwrap();
        let v = Tensor::zeros(vec![2, 3]).unwrap();
        assert!(matches!(
            cp_outer(&[&u, &v]).unwrap_err(),
            CoreError::Dimension(_)
        ));
    }

    #[test]
    fn insert_mode_known_permutation() {
        let mut r = rng(9);
        let t = random_tensor(&[2, 3, 4], &mut r);
        let out = t.insert_mode(Mode(1)).unwrap();
        assert_eq!(out.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out.get(&[c, a, b]), t.get(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn insert_mode_last_position_is_identity_and_inverse_roundtrips() {
        let mut r = rng(10);
        let t = random_tensor(&[2, 3, 4], &mut r);
        assert_eq!(t.insert_mode(Mode(3)).unwrap(), t);
        for k in 1..=3 {
            let round = t
                .insert_mode(Mode(k))
                .unwrap()
                .extract_mode(Mode(k))
                .unwrap();
            assert_eq!(round, t, "insert/extract at k={k} must be bit-exact");
        }
    }

    #[test]
    fn vectorize_row_major_order() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = t.vectorize();
        assert_eq!(v.shape(), &[4]);
        assert_eq!(v.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = v.reshape(vec![2, 2]).unwrap();
        assert_eq!(back, t);
        let one = Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap();
        assert_eq!(one.vectorize(), one);
    }

    #[test]
    fn operations_are_linear_in_the_tensor_argument() {
        let mut r = rng(11);
        let t1 = random_tensor(&[2, 3, 2], &mut r);
        let t2 = random_tensor(&[2, 3, 2], &mut r);
        let m = random_tensor(&[4, 3], &mut r);
        let sum = t1.add_scaled(1.0, &t2).unwrap();
        let lhs = sum.mode_product(&m, Mode(2)).unwrap();
        let rhs = t1
            .mode_product(&m, Mode(2))
            .unwrap()
            .add_scaled(1.0, &t2.mode_product(&m, Mode(2)).unwrap())
            .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn contract_leading_mode_product_adjointness() {
        // <contract_leading(D, G), lam> == <G, mode_product(D, lam-as-(1,r), d+1)>
        let mut r = rng(12);
        let d = random_tensor(&[2, 3, 4], &mut r);
        let g = random_tensor(&[2, 3], &mut r);
        let lam = random_tensor(&[1, 4], &mut r);
        let lhs = d
            .contract_leading(&g)
            .unwrap()
            .frob_dot(&lam.vectorize())
            .unwrap();
        let rhs = d
            .mode_product(&lam, Mode(3))
            .unwrap()
            .frob_dot(&g.reshape(vec![2, 3, 1]).unwrap())
            .unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn binary_format_roundtrip_is_bit_exact() {
        let mut r = rng(13);
        let t = random_tensor(&[3, 2, 5], &mut r);
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"WTNSR1");
        let back = Tensor::read_binary(&mut &buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn binary_format_rejects_bad_magic() {
        let buf = b"NOTFMT\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            Tensor::read_binary(&mut &buf[..]).unwrap_err(),
            CoreError::Format(_)
        ));
    }

    #[test]
    fn csv_roundtrip_for_one_and_two_mode_tensors() {
        let t2 = Tensor::new(vec![2, 3], vec![1.0, 0.5, -2.25, 3.0, 1e-17, 7.0]).unwrap();
        let mut buf = Vec::new();
        t2.write_csv(&mut buf).unwrap();
        let back = Tensor::read_csv(&mut &buf[..]).unwrap();
        assert_eq!(back, t2);

        let t1 = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut buf = Vec::new();
        t1.write_csv(&mut buf).unwrap();
        let back = Tensor::read_csv(&mut &buf[..]).unwrap();
        assert_eq!(back, t1);
    }
}
