//! Slow, obviously-correct reference implementations.
//!
//! Everything here works on plain `Vec<f64>` / `&[f64]` and shares no code
//! with `daan-core`; the core crate only pulls this in as a dev-dependency.
//! Loops are written out in full so each routine can be read against its
//! defining formula.

use std::fmt;

/// Row-major dense matrix as nested rows.
pub type Mat = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    NonFinite { coord: usize, value: f64 },
    BadStep(f64),
    Singular,
    EmptyInput,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::NonFinite { coord, value } => {
                write!(f, "objective non-finite ({value}) while perturbing coordinate {coord}")
            }
            OracleError::BadStep(h) => write!(f, "finite-difference step must be positive, got {h}"),
            OracleError::EmptyInput => f.write_str("no training or test rows"),
            OracleError::Singular => write!(f, "normal equations are singular"),
        }
    }
}

impl std::error::Error for OracleError {}

/// Central finite-difference configuration.
#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffSpec {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        FiniteDiffSpec { step: 1e-5, tolerance: 1e-4 }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn fd_gradient<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>, OracleError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(OracleError::BadStep(step));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() {
            return Err(OracleError::NonFinite { coord: i, value: up });
        }
        if !down.is_finite() {
            return Err(OracleError::NonFinite { coord: i, value: down });
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error with a denominator floor so that components that are
/// zero up to finite-difference noise do not blow up the ratio.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y, floor)).fold(0.0, f64::max)
}

pub fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// dense linear algebra by hand
// ---------------------------------------------------------------------------

pub fn mat_from_flat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    assert_eq!(rows * cols, data.len());
    (0..rows).map(|r| data[r * cols..(r + 1) * cols].to_vec()).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flat_map(|r| r.iter().copied()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let k = b.len();
    let m = if k == 0 { 0 } else { b[0].len() };
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

/// Split-path differential attention evaluated entry by entry.
///
/// `tokens` is T x d_tok; each row is split into halves that feed the two
/// query/key paths. `values` is T x d_v and is mapped by `wv`.
#[allow(clippy::too_many_arguments)]
pub fn differential_attention(
    tokens: &Mat,
    values: &Mat,
    wq1: &Mat,
    wk1: &Mat,
    wq2: &Mat,
    wk2: &Mat,
    wv: &Mat,
    beta: f64,
) -> Mat {
    let t = tokens.len();
    let half = tokens[0].len() / 2;
    let h1: Mat = tokens.iter().map(|r| r[..half].to_vec()).collect();
    let h2: Mat = tokens.iter().map(|r| r[half..].to_vec()).collect();
    let q1 = matmul(&h1, wq1);
    let k1 = matmul(&h1, wk1);
    let q2 = matmul(&h2, wq2);
    let k2 = matmul(&h2, wk2);
    let v = matmul(values, wv);
    let d_att = q1[0].len() as f64;
    let mut scores = vec![vec![0.0; t]; t];
    for i in 0..t {
        let mut s1 = vec![0.0; t];
        let mut s2 = vec![0.0; t];
        for j in 0..t {
            let mut a = 0.0;
            let mut b = 0.0;
            for c in 0..q1[0].len() {
                a += q1[i][c] * k1[j][c];
                b += q2[i][c] * k2[j][c];
            }
            s1[j] = a / d_att.sqrt();
            s2[j] = b / d_att.sqrt();
        }
        let p1 = softmax(&s1);
        let p2 = softmax(&s2);
        for j in 0..t {
            scores[i][j] = p1[j] - beta * p2[j];
        }
    }
    matmul(&scores, &v)
}

/// Single-head scaled dot-product attention.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    let mut out = Vec::with_capacity(q.len());
    for qi in q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let p = softmax(&logits);
        let mut row = vec![0.0; v[0].len()];
        for (j, vj) in v.iter().enumerate() {
            for (c, x) in vj.iter().enumerate() {
                row[c] += p[j] * x;
            }
        }
        out.push(row);
    }
    out
}

// ---------------------------------------------------------------------------
// convolution / temporal stack
// ---------------------------------------------------------------------------

/// Causal dilated convolution. `x` is C_in x T, `w[o][i][k]`, output C_out x T.
/// `y[o][t] = sum_i sum_k w[o][i][k] * x[i][t - k*dilation]` with zeros before t=0.
pub fn conv1d_causal(x: &Mat, w: &[Vec<Vec<f64>>], dilation: usize) -> Mat {
    let c_in = x.len();
    let t_len = x[0].len();
    let mut y = vec![vec![0.0; t_len]; w.len()];
    for (o, w_o) in w.iter().enumerate() {
        for t in 0..t_len {
            let mut s = 0.0;
            for i in 0..c_in {
                for (k, &wk) in w_o[i].iter().enumerate() {
                    let back = k * dilation;
                    if back <= t {
                        s += wk * x[i][t - back];
                    }
                }
            }
            y[o][t] = s;
        }
    }
    y
}

/// Temporal stack on a T x C folded sequence: causal conv (dilation 1),
/// `dilated.len()` convs at `dilation`, then the residual add.
pub fn temporal_stack(
    folded: &Mat,
    causal: &[Vec<Vec<f64>>],
    dilated: &[Vec<Vec<Vec<f64>>>],
    dilation: usize,
) -> Mat {
    let mut h = conv1d_causal(&transpose(folded), causal, 1);
    for w in dilated {
        h = conv1d_causal(&h, w, dilation);
    }
    let h = transpose(&h);
    h.iter()
        .zip(folded)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

/// Adds the last row of `y` to every row of `folded`, then flattens.
pub fn last_step_embed(folded: &Mat, y: &Mat) -> Vec<f64> {
    let last = &y[y.len() - 1];
    let mut out = Vec::new();
    for row in folded {
        for (l, x) in row.iter().enumerate() {
            out.push(x + last[l]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// (x - mean) / sqrt(var + eps) within each of `groups` contiguous groups.
pub fn group_norm(x: &[f64], groups: usize, eps: f64) -> Vec<f64> {
    let size = x.len() / groups;
    let mut out = Vec::with_capacity(x.len());
    for g in 0..groups {
        let chunk = &x[g * size..(g + 1) * size];
        let mean = chunk.iter().sum::<f64>() / size as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
        let denom = (var + eps).sqrt();
        for v in chunk {
            out.push((v - mean) / denom);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

pub fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

pub fn triplet(anchor: &[f64], pos: &[f64], neg: &[f64], margin: f64) -> f64 {
    let v = euclid(anchor, pos) - euclid(anchor, neg) + margin;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Every embedding a single anchor/negative pair produces.
#[derive(Debug, Clone)]
pub struct RawEmbeddings {
    pub theta_a_pos: Vec<f64>,
    pub theta_v_pos: Vec<f64>,
    pub theta_w_pos: Vec<f64>,
    pub theta_a_neg: Vec<f64>,
    pub theta_v_neg: Vec<f64>,
    pub theta_w_neg: Vec<f64>,
    pub rho_a_pos: Vec<f64>,
    pub rho_v_pos: Vec<f64>,
    pub rho_w_pos: Vec<f64>,
    pub rho_a_neg: Vec<f64>,
    pub rho_v_neg: Vec<f64>,
    pub text: Vec<f64>,
    pub phi_a: Vec<f64>,
    pub phi_v: Vec<f64>,
    pub phi_w: Vec<f64>,
    pub phi_a_rec: Vec<f64>,
    pub phi_v_rec: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub triplet: f64,
    pub rec: f64,
    pub composite_triplet: f64,
    pub text_triplet: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Line-by-line evaluation of the triplet / composite / regularization sums.
/// `rec_mse` selects mean-squared distance for the three reconstruction terms.
pub fn recompute_losses(e: &RawEmbeddings, margin: f64, rec_mse: bool) -> LossTerms {
    let t = |a: &[f64], p: &[f64], n: &[f64]| triplet(a, p, n, margin);
    let rec_d = |a: &[f64], b: &[f64]| if rec_mse { mean_sq(a, b) } else { euclid(a, b) };

    let l_t = t(&e.theta_a_pos, &e.theta_w_pos, &e.theta_a_neg)
        + t(&e.theta_v_pos, &e.theta_w_pos, &e.theta_v_neg)
        + t(&e.theta_w_pos, &e.theta_a_pos, &e.theta_w_neg)
        + t(&e.theta_w_pos, &e.theta_v_pos, &e.theta_w_neg);

    let l_rec = rec_d(&e.rho_a_pos, &e.text) + rec_d(&e.rho_v_pos, &e.text) + rec_d(&e.rho_w_pos, &e.text);

    let l_ct = t(&e.rho_w_pos, &e.rho_a_pos, &e.rho_a_neg) + t(&e.rho_w_pos, &e.rho_v_pos, &e.rho_v_neg);

    let l_w = t(&e.theta_w_pos, &e.theta_a_pos, &e.theta_a_neg)
        + t(&e.theta_w_pos, &e.theta_v_pos, &e.theta_v_neg)
        + t(&e.theta_a_pos, &e.theta_w_pos, &e.theta_w_neg)
        + t(&e.theta_v_pos, &e.theta_w_pos, &e.theta_w_neg);

    let l_r = euclid(&e.phi_a_rec, &e.phi_a)
        + euclid(&e.phi_v_rec, &e.phi_v)
        + euclid(&e.phi_a, &e.phi_w)
        + euclid(&e.phi_v, &e.phi_w);

    LossTerms {
        triplet: l_t,
        rec: l_rec,
        composite_triplet: l_ct,
        text_triplet: l_w,
        regularization: l_r,
        total: l_t + (l_rec + l_ct + l_w) + l_r,
    }
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

/// Index of the nearest candidate by Euclidean distance, lowest index on ties.
pub fn nearest_scan(query: &[f64], candidates: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d = euclid(query, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Least-squares one-hot regression probe (with a tiny ridge for
/// conditioning); returns plain accuracy on the test rows.
pub fn linear_probe_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    num_classes: usize,
) -> Result<f64, OracleError> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(OracleError::EmptyInput);
    }
    let d = train_x[0].len() + 1;
    let aug = |x: &Vec<f64>| {
        let mut v = x.clone();
        v.push(1.0);
        v
    };
    // normal equations (X^T X + r I) W = X^T Y
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![vec![0.0; num_classes]; d];
    for (x, &y) in train_x.iter().zip(train_y) {
        let a = aug(x);
        for i in 0..d {
            for j in 0..d {
                xtx[i][j] += a[i] * a[j];
            }
            xty[i][y] += a[i];
        }
    }
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    let w = solve(xtx, xty)?;
    let mut correct = 0usize;
    for (x, &y) in test_x.iter().zip(test_y) {
        let a = aug(x);
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for c in 0..num_classes {
            let s: f64 = (0..d).map(|i| a[i] * w[i][c]).sum();
            if s > best_s {
                best_s = s;
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_x.len() as f64)
}

/// Gauss-Jordan elimination with partial pivoting, multiple right-hand sides.
fn solve(mut a: Mat, mut b: Mat) -> Result<Mat, OracleError> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(OracleError::Singular);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
        }
        for j in 0..b[col].len() {
            b[col][j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for j in 0..n {
                        a[r][j] -= f * a[col][j];
                    }
                    for j in 0..b[r].len() {
                        b[r][j] -= f * b[col][j];
                    }
                }
            }
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_squared_norm() {
        let g = fd_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let g = fd_gradient(|_| 3.5, &[0.3, -1.0, 7.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_reports_non_finite() {
        let err = fd_gradient(|x| 1.0 / x[0], &[0.0], 1e-5);
        assert!(err.is_ok());
        let err = fd_gradient(|x| (x[0] - 1e-5).ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, OracleError::NonFinite { coord: 0, .. }));
        assert!(matches!(fd_gradient(|_| 0.0, &[0.0], 0.0), Err(OracleError::BadStep(_))));
    }

    #[test]
    fn zero_loss_construction() {
        let v = vec![0.5, -0.5];
        let far = vec![10.0, 10.0];
        let e = RawEmbeddings {
            theta_a_pos: v.clone(),
            theta_v_pos: v.clone(),
            theta_w_pos: v.clone(),
            theta_a_neg: far.clone(),
            theta_v_neg: far.clone(),
            theta_w_neg: far.clone(),
            rho_a_pos: v.clone(),
            rho_v_pos: v.clone(),
            rho_w_pos: v.clone(),
            rho_a_neg: far.clone(),
            rho_v_neg: far,
            text: v.clone(),
            phi_a: v.clone(),
            phi_v: v.clone(),
            phi_w: v.clone(),
            phi_a_rec: v.clone(),
            phi_v_rec: v,
        };
        assert_eq!(recompute_losses(&e, 1.0, true).total, 0.0);
    }

    #[test]
    fn conv_impulse() {
        let mut x = vec![vec![0.0; 12]];
        x[0][5] = 1.0;
        let y = conv1d_causal(&x, &[vec![vec![2.0, 3.0]]], 3);
        for (t, v) in y[0].iter().enumerate() {
            match t {
                5 => assert_eq!(*v, 2.0),
                8 => assert_eq!(*v, 3.0),
                _ => assert_eq!(*v, 0.0),
            }
        }
    }

    #[test]
    fn probe_separates_clean_clusters() {
        let xs = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        let ys = vec![0, 0, 1, 1];
        let acc = linear_probe_accuracy(&xs, &ys, &xs, &ys, 2).unwrap();
        assert_eq!(acc, 1.0);
    }
}
