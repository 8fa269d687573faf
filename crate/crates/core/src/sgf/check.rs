//! Self-check suite for the attention kernel, run by `harmony sgf-check`.
//!
//! The reference routines here are plain triple loops over nested
//! vectors and share no code with the kernel above.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{
    attention_extended, attention_sgf, attention_vanilla, init_weights, run_sgf, softmax_rows, AttentionMode, Matrix,
    ProjectionWeights, SgfDims,
};
use crate::error::Result;

pub const GOLDEN_JSON: &str = include_str!("../../fixtures/sgf_golden.json");

/// Tolerance for every comparison in the suite.
pub const TOLERANCE: f64 = 1e-6;

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn naive_matmul(a: &Rows, b: &Rows, inner: usize, cols: usize) -> Rows {
    let mut out = vec![vec![0.0; cols]; a.len()];
    for i in 0..a.len() {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn hcat(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

fn vcat(a: &Rows, b: &Rows) -> Rows {
    a.iter().chain(b).cloned().collect()
}

/// Reference fusion pass over nested vectors.
pub struct NaiveBundle {
    pub scores: Rows,
    pub weights: Rows,
    pub weighted: Rows,
    pub modulated: Rows,
}

#[allow(clippy::too_many_arguments)]
pub fn naive_sgf(e_f: &Rows, e_b: &Rows, e_r: &Rows, c_f: &Rows, c_b: &Rows, c_r: &Rows, w: &ProjectionWeights) -> NaiveBundle {
    let (wq, wk, wo) = (to_rows(&w.w_query), to_rows(&w.w_key), to_rows(&w.w_out));
    let d_in = wq.len();
    let dp = w.dims.d_proj;
    let q = naive_matmul(&hcat(e_f, c_f), &wq, d_in, dp);
    let values = vcat(e_b, e_r);
    let keys = hcat(&values, &vcat(c_b, c_r));
    let k = naive_matmul(&keys, &wk, d_in, dp);
    let scale = 1.0 / (dp as f64).sqrt();
    let n = keys.len();
    let mut scores = vec![vec![0.0; n]; q.len()];
    for i in 0..q.len() {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..dp {
                s += q[i][t] * k[j][t];
            }
            scores[i][j] = s * scale;
        }
    }
    let weights: Rows = scores
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect();
    let d_e = w.dims.d_e;
    let weighted = naive_matmul(&weights, &values, n, d_e);
    let modulated = naive_matmul(&hcat(e_f, &weighted), &wo, 2 * d_e, d_e);
    NaiveBundle {
        scores,
        weights,
        weighted,
        modulated,
    }
}

fn max_diff(m: &Matrix, rows: &Rows) -> f64 {
    if m.rows() != rows.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m.cols() {
            return f64::INFINITY;
        }
        for (j, v) in r.iter().enumerate() {
            worst = worst.max((m.get(i, j) - v).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub seed: u64,
    pub draws: usize,
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

/// Uniform draws in `[lo, hi)` from a seeded stream.
pub struct Draws(ChaCha8Rng);

impl Draws {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn int(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + (self.0.next_u64() % (hi_inclusive - lo + 1) as u64) as usize
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.range(-1.0, 1.0))
    }
}

/// One random instance of the fusion inputs.
pub struct Instance {
    pub e_f: Matrix,
    pub e_b: Matrix,
    pub e_r: Matrix,
    pub c_f: Matrix,
    pub c_b: Matrix,
    pub c_r: Matrix,
    pub weights: ProjectionWeights,
}

impl Instance {
    pub fn random(draws: &mut Draws, max_tokens: usize, max_dim: usize) -> Result<Self> {
        let f = draws.int(1, max_tokens);
        let b = draws.int(1, max_tokens);
        let r = draws.int(0, max_tokens);
        let dims = SgfDims {
            d_e: draws.int(1, max_dim),
            d_c: draws.int(1, max_dim),
            d_proj: draws.int(1, max_dim),
        };
        let seed = draws.int(0, 1 << 20) as u64;
        Ok(Self {
            e_f: draws.matrix(f, dims.d_e),
            e_b: draws.matrix(b, dims.d_e),
            e_r: draws.matrix(r, dims.d_e),
            c_f: draws.matrix(f, dims.d_c),
            c_b: draws.matrix(b, dims.d_c),
            c_r: draws.matrix(r, dims.d_c),
            weights: init_weights(seed, dims, AttentionMode::Sgf)?,
        })
    }
}

fn outcome(name: &str, max_error: f64, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        max_error,
        detail,
    }
}

/// Runs every invariant on `draws` random instances plus the golden fixture.
pub fn run_suite(seed: u64, draws: usize) -> Result<CheckReport> {
    let mut rng = Draws::new(seed);
    let mut oracle_err: f64 = 0.0;
    let mut rowsum_err: f64 = 0.0;
    let mut negative = 0usize;
    let mut reduction_err: f64 = 0.0;
    let mut perm_err: f64 = 0.0;
    let mut perm_cols_err: f64 = 0.0;
    let mut argmax_violations = 0usize;

    for _ in 0..draws {
        let inst = Instance::random(&mut rng, 64, 32)?;
        let w = &inst.weights;
        let bundle = run_sgf(&inst.e_f, &inst.e_b, &inst.e_r, &inst.c_f, &inst.c_b, &inst.c_r, w)?;
        let naive = naive_sgf(
            &to_rows(&inst.e_f),
            &to_rows(&inst.e_b),
            &to_rows(&inst.e_r),
            &to_rows(&inst.c_f),
            &to_rows(&inst.c_b),
            &to_rows(&inst.c_r),
            w,
        );
        oracle_err = oracle_err
            .max(max_diff(&bundle.scores, &naive.scores))
            .max(max_diff(&bundle.weights, &naive.weights))
            .max(max_diff(&bundle.weighted, &naive.weighted))
            .max(max_diff(&bundle.modulated, &naive.modulated));

        for i in 0..bundle.weights.rows() {
            let row = bundle.weights.row(i);
            rowsum_err = rowsum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            negative += row.iter().filter(|&&v| v < 0.0).count();
        }

        // with no reference tokens the guided pass is plain attention over
        // channel-concatenated inputs, and the extended form is vanilla
        let empty_e = Matrix::zeros(0, w.dims.d_e);
        let empty_c = Matrix::zeros(0, w.dims.d_c);
        let guided = attention_sgf(&inst.e_f, &inst.e_b, &empty_e, &inst.c_f, &inst.c_b, &empty_c, w)?;
        let plain = attention_vanilla(&inst.e_f.concat_cols(&inst.c_f)?, &inst.e_b.concat_cols(&inst.c_b)?, w)?;
        reduction_err = reduction_err.max(guided.max_abs_diff(&plain));
        let vw = init_weights(7, w.dims, AttentionMode::Vanilla)?;
        let ext = attention_extended(&inst.e_f, &inst.e_b, &empty_e, &vw)?;
        reduction_err = reduction_err.max(ext.max_abs_diff(&attention_vanilla(&inst.e_f, &inst.e_b, &vw)?));

        // permuting key/value tokens permutes score columns and leaves e_w fixed
        let n = inst.e_b.rows() + inst.e_r.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.int(0, i));
        }
        let values = inst.e_b.concat_rows(&inst.e_r)?.select_rows(&perm);
        let guides = inst.c_b.concat_rows(&inst.c_r)?.select_rows(&perm);
        let split = inst.e_b.rows();
        let (pb, pr) = (values.select_rows(&(0..split).collect::<Vec<_>>()), values.select_rows(&(split..n).collect::<Vec<_>>()));
        let (gb, gr) = (guides.select_rows(&(0..split).collect::<Vec<_>>()), guides.select_rows(&(split..n).collect::<Vec<_>>()));
        let permuted = run_sgf(&inst.e_f, &pb, &pr, &inst.c_f, &gb, &gr, w)?;
        perm_err = perm_err.max(permuted.weighted.max_abs_diff(&bundle.weighted));
        for i in 0..bundle.scores.rows() {
            for (j, &p) in perm.iter().enumerate() {
                perm_cols_err = perm_cols_err.max((permuted.scores.get(i, j) - bundle.scores.get(i, p)).abs());
            }
        }

        // positive rescaling keeps each row's argmax
        let factor = rng.range(0.05, 20.0);
        let scaled = softmax_rows(&bundle.scores.scale(factor));
        for i in 0..bundle.scores.rows() {
            if argmax(bundle.scores.row(i)) != argmax(scaled.row(i)) {
                argmax_violations += 1;
            }
        }
    }

    let golden = golden_error()?;
    let mut outcomes = vec![
        outcome(
            "oracle_equivalence",
            oracle_err,
            oracle_err <= TOLERANCE,
            format!("{draws} draws, F,B,R <= 64, d <= 32"),
        ),
        outcome(
            "row_stochastic",
            rowsum_err,
            rowsum_err <= TOLERANCE && negative == 0,
            format!("{negative} negative weights"),
        ),
        outcome("empty_reference_reduction", reduction_err, reduction_err <= TOLERANCE, String::new()),
        outcome(
            "permutation_invariance",
            perm_err.max(perm_cols_err),
            perm_err <= TOLERANCE && perm_cols_err <= TOLERANCE,
            format!("e_w {perm_err:.3e}, score columns {perm_cols_err:.3e}"),
        ),
        outcome(
            "scale_argmax",
            argmax_violations as f64,
            argmax_violations == 0,
            format!("{argmax_violations} rows changed argmax"),
        ),
    ];
    outcomes.push(outcome("golden_fixture", golden, golden <= TOLERANCE, "numpy reference".into()));
    Ok(CheckReport {
        seed,
        draws,
        outcomes,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Deserialize)]
struct Golden {
    seed: u64,
    dims: SgfDims,
    inputs: GoldenInputs,
    expected: GoldenExpected,
}

#[derive(Deserialize)]
struct GoldenInputs {
    e_f: Rows,
    e_b: Rows,
    e_r: Rows,
    c_f: Rows,
    c_b: Rows,
    c_r: Rows,
}

#[derive(Deserialize)]
struct GoldenExpected {
    scores: Rows,
    weights: Rows,
    weighted: Rows,
    modulated: Rows,
}

/// Largest deviation of the kernel from the checked-in golden bundle.
pub fn golden_error() -> Result<f64> {
    let g: Golden = serde_json::from_str(GOLDEN_JSON).map_err(|e| crate::Error::json("golden", e))?;
    let w = init_weights(g.seed, g.dims, AttentionMode::Sgf)?;
    let m = |rows: &Rows, cols: usize| {
        if rows.is_empty() {
            Ok(Matrix::zeros(0, cols))
        } else {
            Matrix::from_rows(rows)
        }
    };
    let i = &g.inputs;
    let bundle = run_sgf(
        &m(&i.e_f, g.dims.d_e)?,
        &m(&i.e_b, g.dims.d_e)?,
        &m(&i.e_r, g.dims.d_e)?,
        &m(&i.c_f, g.dims.d_c)?,
        &m(&i.c_b, g.dims.d_c)?,
        &m(&i.c_r, g.dims.d_c)?,
        &w,
    )?;
    Ok(max_diff(&bundle.scores, &g.expected.scores)
        .max(max_diff(&bundle.weights, &g.expected.weights))
        .max(max_diff(&bundle.weighted, &g.expected.weighted))
        .max(max_diff(&bundle.modulated, &g.expected.modulated)))
}

/// Bundle for the golden inputs, for `--dump`.
pub fn golden_bundle() -> Result<super::AttentionBundle> {
    let g: Golden = serde_json::from_str(GOLDEN_JSON).map_err(|e| crate::Error::json("golden", e))?;
    let w = init_weights(g.seed, g.dims, AttentionMode::Sgf)?;
    let i = &g.inputs;
    run_sgf(
        &Matrix::from_rows(&i.e_f)?,
        &Matrix::from_rows(&i.e_b)?,
        &Matrix::from_rows(&i.e_r)?,
        &Matrix::from_rows(&i.c_f)?,
        &Matrix::from_rows(&i.c_b)?,
        &Matrix::from_rows(&i.c_r)?,
        &w,
    )
}
