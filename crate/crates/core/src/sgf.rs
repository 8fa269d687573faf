//! Semantic-guided fusion attention as a standalone tensor kernel.
//!
//! Scores are `phi_q(query) x phi_k(keys)^T / sqrt(d_proj)` with bias-free
//! linear projections. Guidance features are concatenated on the channel
//! axis of both queries and keys; reference tokens are concatenated with
//! background tokens on the token axis.

pub mod check;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raif::RaifBlob;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Token features: one row per token.
pub type FeatureMatrix = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self x other`, accumulating over the inner index in order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                for (dst, &b) in o.iter_mut().zip(other.row(k)) {
                    *dst += aik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self x other^T`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}^T",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum()
        }))
    }

    /// Stacks token rows (`[a, b]_s`). An empty operand may have any width.
    pub fn concat_rows(&self, other: &Matrix) -> Result<Matrix> {
        if other.rows == 0 {
            return Ok(self.clone());
        }
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "token concat of widths {} and {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Concatenates channels (`[a, b]_c`).
    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::GuidanceMisaligned(format!(
                "channel concat of {} and {} tokens",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in comparison");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Vanilla,
    Extended,
    Sgf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgfDims {
    pub d_e: usize,
    pub d_c: usize,
    pub d_proj: usize,
}

impl SgfDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_c == 0 || self.d_proj == 0 {
            return Err(Error::Config(format!("attention dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Query, key and output projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWeights {
    pub mode: AttentionMode,
    pub dims: SgfDims,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_out: Matrix,
}

impl ProjectionWeights {
    pub fn new(mode: AttentionMode, dims: SgfDims, w_query: Matrix, w_key: Matrix, w_out: Matrix) -> Result<Self> {
        dims.validate()?;
        let d_in = match mode {
            AttentionMode::Sgf => dims.d_e + dims.d_c,
            _ => dims.d_e,
        };
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!("{name} is {:?}, expected {shape:?}", m.shape())))
            }
        };
        expect("w_query", &w_query, (d_in, dims.d_proj))?;
        expect("w_key", &w_key, (d_in, dims.d_proj))?;
        expect("w_out", &w_out, (2 * dims.d_e, dims.d_e))?;
        Ok(Self {
            mode,
            dims,
            w_query,
            w_key,
            w_out,
        })
    }

    fn score_scale(&self) -> f64 {
        1.0 / (self.dims.d_proj as f64).sqrt()
    }
}

/// Reproducible weight entry:
/// `(((i * 2654435761 + j * 40503 + seed) mod 65536) / 65536 - 0.5) * 0.2`.
pub fn weight_value(seed: u64, i: u64, j: u64) -> f64 {
    // wrapping arithmetic is exact modulo 2^16 because 2^16 divides 2^64
    let k = i.wrapping_mul(2_654_435_761).wrapping_add(j.wrapping_mul(40_503)).wrapping_add(seed) % 65_536;
    (k as f64 / 65_536.0 - 0.5) * 0.2
}

/// Deterministic weights; every matrix uses the same formula and seed.
pub fn init_weights(seed: u64, dims: SgfDims, mode: AttentionMode) -> Result<ProjectionWeights> {
    dims.validate()?;
    let d_in = match mode {
        AttentionMode::Sgf => dims.d_e + dims.d_c,
        _ => dims.d_e,
    };
    let gen = |r: usize, c: usize| Matrix::from_fn(r, c, |i, j| weight_value(seed, i as u64, j as u64));
    ProjectionWeights::new(
        mode,
        dims,
        gen(d_in, dims.d_proj),
        gen(d_in, dims.d_proj),
        gen(2 * dims.d_e, dims.d_e),
    )
}

fn project_scores(queries: &Matrix, keys: &Matrix, w: &ProjectionWeights) -> Result<Matrix> {
    if queries.cols() != w.w_query.rows() {
        return Err(Error::ShapeMismatch(format!(
            "query width {} vs w_query rows {}",
            queries.cols(),
            w.w_query.rows()
        )));
    }
    let q = queries.matmul(&w.w_query)?;
    let k = if keys.rows() == 0 {
        Matrix::zeros(0, w.dims.d_proj)
    } else {
        if keys.cols() != w.w_key.rows() {
            return Err(Error::ShapeMismatch(format!(
                "key width {} vs w_key rows {}",
                keys.cols(),
                w.w_key.rows()
            )));
        }
        keys.matmul(&w.w_key)?
    };
    Ok(q.matmul_transposed(&k)?.scale(w.score_scale()))
}

/// Foreground-to-background scores, F x B.
pub fn attention_vanilla(e_f: &Matrix, e_b: &Matrix, w: &ProjectionWeights) -> Result<Matrix> {
    project_scores(e_f, e_b, w)
}

/// Scores against background and reference tokens, F x (B + R).
pub fn attention_extended(e_f: &Matrix, e_b: &Matrix, e_r: &Matrix, w: &ProjectionWeights) -> Result<Matrix> {
    project_scores(e_f, &e_b.concat_rows(e_r)?, w)
}

/// Guided scores: encoder and guidance features concatenated per token.
#[allow(clippy::too_many_arguments)]
pub fn attention_sgf(
    e_f: &Matrix,
    e_b: &Matrix,
    e_r: &Matrix,
    c_f: &Matrix,
    c_b: &Matrix,
    c_r: &Matrix,
    w: &ProjectionWeights,
) -> Result<Matrix> {
    let counts = [
        ("foreground", e_f.rows(), c_f.rows()),
        ("background", e_b.rows(), c_b.rows()),
        ("reference", e_r.rows(), c_r.rows()),
    ];
    for (name, e, c) in counts {
        if e != c {
            return Err(Error::GuidanceMisaligned(format!("{name}: {e} encoder tokens vs {c} guidance tokens")));
        }
    }
    let widths = [c_f, c_b, c_r].iter().filter(|m| m.rows() > 0).map(|m| m.cols()).collect::<Vec<_>>();
    if widths.windows(2).any(|p| p[0] != p[1]) {
        return Err(Error::ShapeMismatch(format!("guidance widths differ: {widths:?}")));
    }
    let queries = e_f.concat_cols(c_f)?;
    let values = e_b.concat_rows(e_r)?;
    let guides = c_b.concat_rows(c_r)?;
    let keys = if values.rows() == 0 {
        Matrix::zeros(0, queries.cols())
    } else {
        values.concat_cols(&guides)?
    };
    project_scores(&queries, &keys, w)
}

/// Row-wise softmax with the row maximum subtracted.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    let cols = out.cols;
    if cols == 0 {
        return out;
    }
    for row in out.data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// `W x [e_b, e_r]_s`.
pub fn weighted_features(weights: &Matrix, e_b: &Matrix, e_r: &Matrix) -> Result<Matrix> {
    let values = e_b.concat_rows(e_r)?;
    if weights.cols() != values.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention columns vs {} value tokens",
            weights.cols(),
            values.rows()
        )));
    }
    weights.matmul(&values)
}

/// `[e_f, e_w]_c x w_out`.
pub fn modulate(e_f: &Matrix, e_w: &Matrix, w: &ProjectionWeights) -> Result<Matrix> {
    let joined = e_f.concat_cols(e_w).map_err(|_| {
        Error::ShapeMismatch(format!("e_f has {} tokens, e_w has {}", e_f.rows(), e_w.rows()))
    })?;
    if joined.cols() != w.w_out.rows() {
        return Err(Error::ShapeMismatch(format!(
            "concatenated width {} vs w_out rows {}",
            joined.cols(),
            w.w_out.rows()
        )));
    }
    joined.matmul(&w.w_out)
}

/// Every intermediate of one fusion pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    pub scores: Matrix,
    pub weights: Matrix,
    pub weighted: Matrix,
    pub modulated: Matrix,
}

impl AttentionBundle {
    /// Column sums of the softmax weights: the attention mass each
    /// background/reference token receives from all foreground queries.
    pub fn column_mass(&self) -> Vec<f64> {
        let (rows, cols) = self.weights.shape();
        let mut mass = vec![0.0; cols];
        for i in 0..rows {
            for (m, w) in mass.iter_mut().zip(self.weights.row(i)) {
                *m += w;
            }
        }
        mass
    }

    /// Writes each tensor as a RAIF blob (rows x 1 grid, cols as dim) plus
    /// `bundle.json` listing shapes.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = serde_json::Map::new();
        for (name, m) in [
            ("scores", &self.scores),
            ("weights", &self.weights),
            ("weighted", &self.weighted),
            ("modulated", &self.modulated),
        ] {
            let file = format!("{name}.raif");
            RaifBlob::new(m.rows(), 1, m.cols(), m.data().iter().map(|&v| v as f32).collect())?
                .write(dir.join(&file))?;
            manifest.insert(
                name.to_string(),
                serde_json::json!({ "rows": m.rows(), "cols": m.cols(), "file": file }),
            );
        }
        let path = dir.join("bundle.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("bundle", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Guided scores, softmax, weighted values and modulation in one pass.
#[allow(clippy::too_many_arguments)]
pub fn run_sgf(
    e_f: &Matrix,
    e_b: &Matrix,
    e_r: &Matrix,
    c_f: &Matrix,
    c_b: &Matrix,
    c_r: &Matrix,
    w: &ProjectionWeights,
) -> Result<AttentionBundle> {
    let scores = attention_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w)?;
    let weights = softmax_rows(&scores);
    let weighted = weighted_features(&weights, e_b, e_r)?;
    let modulated = modulate(e_f, &weighted, w)?;
    Ok(AttentionBundle {
        scores,
        weights,
        weighted,
        modulated,
    })
}

/// Average-pools a `rows x cols` token grid down to `to_rows x to_cols`.
pub fn pool_tokens(tokens: &Matrix, rows: usize, cols: usize, to_rows: usize, to_cols: usize) -> Result<Matrix> {
    if tokens.rows() != rows * cols {
        return Err(Error::GuidanceMisaligned(format!(
            "{} tokens for a {rows}x{cols} grid",
            tokens.rows()
        )));
    }
    if to_rows == 0 || to_cols == 0 || !rows.is_multiple_of(to_rows) || !cols.is_multiple_of(to_cols) {
        return Err(Error::GuidanceMisaligned(format!(
            "cannot pool a {rows}x{cols} grid to {to_rows}x{to_cols}"
        )));
    }
    let (fy, fx) = (rows / to_rows, cols / to_cols);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = Matrix::zeros(to_rows * to_cols, tokens.cols());
    for r in 0..rows {
        for c in 0..cols {
            let dst = (r / fy) * to_cols + c / fx;
            for k in 0..tokens.cols() {
                let v = out.get(dst, k) + tokens.get(r * cols + c, k) * inv;
                out.set(dst, k, v);
            }
        }
    }
    Ok(out)
}

/// Brings encoder and guidance token grids to a common resolution by
/// pooling whichever is finer.
pub fn align_tokens(
    encoder: (&Matrix, usize, usize),
    guidance: (&Matrix, usize, usize),
) -> Result<(Matrix, Matrix, (usize, usize))> {
    let (e, er, ec) = encoder;
    let (g, gr, gc) = guidance;
    let nested = (er >= gr && ec >= gc) || (er <= gr && ec <= gc);
    if !nested {
        return Err(Error::GuidanceMisaligned(format!(
            "encoder grid {er}x{ec} and guidance grid {gr}x{gc} are not nested"
        )));
    }
    let (tr, tc) = (er.min(gr), ec.min(gc));
    let e2 = pool_tokens(e, er, ec, tr, tc)?;
    let g2 = pool_tokens(g, gr, gc, tr, tc)?;
    Ok((e2, g2, (tr, tc)))
}
