//! Reference implementations by explicit summation over individuals, using
//! plain `Vec`s and Gauss–Jordan inversion. Shares no code with the library.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn invert(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        assert!(d.abs() > 1e-300, "oracle: singular matrix");
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    for j in 0..2 * n {
                        m[i][j] -= f * m[col][j];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn mat_vec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(u, v)| u * v).sum())
        .collect()
}

/// Everything the estimators produce, recomputed from scratch given the
/// response probabilities `p`.
#[derive(Debug, Clone)]
pub struct OracleOutput {
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    pub sigma2: f64,
    pub gram: Mat,
    pub naive: Mat,
    pub gamma: Mat,
    /// `|I⁻¹| Σ_j |term_j|` elementwise: the size of the summands behind
    /// `gamma`, which can cancel to zero exactly.
    pub gamma_scale: Mat,
    /// u[i][k]
    pub u: Mat,
    pub v: Mat,
    pub robust: Mat,
    pub linearized: Mat,
}

pub struct OracleInput<'a> {
    pub x: &'a Mat,
    pub z: &'a Mat,
    pub y: &'a [f64],
    pub r: &'a [bool],
    pub v: &'a [f64],
    pub p: &'a [f64],
}

pub fn estimate(input: &OracleInput) -> OracleOutput {
    let n = input.r.len();
    let q = input.x[0].len();
    let pz = input.z[0].len();
    let (x, z, y, r, vv, p) = (input.x, input.z, input.y, input.r, input.v, input.p);

    let mut gram = zeros(pz, pz);
    let mut cross = vec![0.0; pz];
    for i in 0..n {
        if !r[i] {
            continue;
        }
        let w = 1.0 / (p[i] * vv[i]);
        for a in 0..pz {
            cross[a] += w * z[i][a] * y[i];
            for b in 0..pz {
                gram[a][b] += w * z[i][a] * z[i][b];
            }
        }
    }
    let ginv = invert(&gram);
    let beta = mat_vec(&ginv, &cross);

    let mut residuals = vec![f64::NAN; n];
    let mut sse = 0.0;
    let mut wsum = 0.0;
    for i in 0..n {
        if r[i] {
            let fit: f64 = (0..pz).map(|a| z[i][a] * beta[a]).sum();
            residuals[i] = y[i] - fit;
            sse += residuals[i] * residuals[i] / (p[i] * vv[i]);
            wsum += 1.0 / p[i];
        }
    }
    let sigma2 = sse / (wsum - pz as f64);
    let naive: Mat = ginv
        .iter()
        .map(|row| row.iter().map(|e| e * sigma2).collect())
        .collect();

    let mut info = zeros(q, q);
    for i in 0..n {
        for a in 0..q {
            for b in 0..q {
                info[a][b] += p[i] * (1.0 - p[i]) * x[i][a] * x[i][b];
            }
        }
    }
    let mut right = zeros(q, pz);
    let mut right_abs = zeros(q, pz);
    for j in 0..n {
        if !r[j] {
            continue;
        }
        for a in 0..q {
            for b in 0..pz {
                let t = (1.0 / p[j] - 1.0) * residuals[j] / vv[j] * x[j][a] * z[j][b];
                right[a][b] += t;
                right_abs[a][b] += t.abs();
            }
        }
    }
    let all_zero = right.iter().flatten().all(|&e| e == 0.0);
    let iinv = if all_zero { zeros(q, q) } else { invert(&info) };
    let mut gamma_scale = zeros(q, pz);
    for a in 0..q {
        for b in 0..pz {
            for c in 0..q {
                gamma_scale[a][b] += iinv[a][c].abs() * right_abs[c][b];
            }
        }
    }
    let gamma = if all_zero {
        right
    } else {
        let mut g = zeros(q, pz);
        for a in 0..q {
            for b in 0..pz {
                for c in 0..q {
                    g[a][b] += iinv[a][c] * right[c][b];
                }
            }
        }
        g
    };

    let mut u = zeros(n, pz);
    let mut vinf = zeros(n, pz);
    for i in 0..n {
        let ri = if r[i] { 1.0 } else { 0.0 };
        let mut score = vec![0.0; pz];
        if r[i] {
            for a in 0..pz {
                score[a] = residuals[i] / (p[i] * vv[i]) * z[i][a];
            }
        }
        let mut corrected = score.clone();
        for b in 0..pz {
            let gx: f64 = (0..q).map(|a| gamma[a][b] * x[i][a]).sum();
            corrected[b] -= (ri - p[i]) * gx;
        }
        vinf[i] = mat_vec(&ginv, &score);
        u[i] = mat_vec(&ginv, &corrected);
    }

    let factor = n as f64 / (n as f64 - 1.0);
    let outer = |m: &Mat| {
        let mut out = zeros(pz, pz);
        for row in m {
            for a in 0..pz {
                for b in 0..pz {
                    out[a][b] += row[a] * row[b];
                }
            }
        }
        for row in out.iter_mut() {
            for e in row.iter_mut() {
                *e *= factor;
            }
        }
        out
    };
    let robust = outer(&vinf);
    let linearized = outer(&u);
    OracleOutput {
        beta,
        residuals,
        sigma2,
        gram,
        naive,
        gamma,
        gamma_scale,
        u,
        v: vinf,
        robust,
        linearized,
    }
}

/// Bernoulli log-likelihood of a logistic model.
pub fn log_likelihood(x: &Mat, r: &[bool], alpha: &[f64]) -> f64 {
    x.iter()
        .zip(r)
        .map(|(row, &ri)| {
            let eta: f64 = row.iter().zip(alpha).map(|(a, b)| a * b).sum();
            let ll1 = -(1.0 + (-eta).exp()).ln();
            let ll0 = -(1.0 + eta.exp()).ln();
            if ri {
                ll1
            } else {
                ll0
            }
        })
        .sum()
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-11 {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}

/// Two-parameter logistic MLE by a dense grid over [−5, 5]² followed by
/// nested golden-section refinement around the best grid point.
pub fn grid_logistic_mle(x: &Mat, r: &[bool]) -> (f64, f64) {
    let step = 0.01;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=1000 {
        let a0 = -5.0 + step * i as f64;
        for j in 0..=1000 {
            let a1 = -5.0 + step * j as f64;
            let ll = log_likelihood(x, r, &[a0, a1]);
            if ll > best.0 {
                best = (ll, a0, a1);
            }
        }
    }
    let (c0, c1) = (best.1, best.2);
    let inner = |a0: f64| {
        let a1 = golden_max(|a1| log_likelihood(x, r, &[a0, a1]), c1 - 2.0 * step, c1 + 2.0 * step);
        (a1, log_likelihood(x, r, &[a0, a1]))
    };
    let a0 = golden_max(|a0| inner(a0).1, c0 - 2.0 * step, c0 + 2.0 * step);
    (a0, inner(a0).0)
}

/// Relative max-norm error of `a` against `b`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    rel_err_scaled(a, b, b)
}

/// Max-norm error of `a` against `b`, relative to the max-norm of `scale`.
pub fn rel_err_scaled(a: &[f64], b: &[f64], scale: &[f64]) -> f64 {
    let scale = scale.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
