// Direct reference computations, written from the formulas with plain loops
// and no library code, used to cross-check the graph implementations.
#![allow(dead_code, clippy::needless_range_loop)]

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Same-padded width-`k` convolution with ReLU. `x` is `[m][d]`, `w` is
/// `[k·d][f]` with window rows stacked in order, `b` is `[f]`.
pub fn conv1d(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], k: usize) -> Vec<Vec<f64>> {
    let m = x.len();
    let d = x[0].len();
    let f = b.len();
    let before = (k - 1).div_ceil(2) as isize;
    let mut out = vec![vec![0.0; f]; m];
    for i in 0..m {
        for j in 0..f {
            let mut s = b[j];
            for o in 0..k {
                let r = i as isize + o as isize - before;
                if r < 0 || r >= m as isize {
                    continue;
                }
                for c in 0..d {
                    s += x[r as usize][c] * w[o * d + c][j];
                }
            }
            out[i][j] = s.max(0.0);
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// LSTM over `x` (`[T][d]`) from zero state; gate blocks (i, f, g, o) along
/// the `4H` columns of `w_x` (`[d][4H]`), `w_h` (`[H][4H]`) and `b`.
pub fn lstm(
    x: &[Vec<f64>],
    w_x: &[Vec<f64>],
    w_h: &[Vec<f64>],
    b: &[f64],
    reverse: bool,
) -> Vec<Vec<f64>> {
    let hidden = b.len() / 4;
    let steps = x.len();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = vec![vec![0.0; hidden]; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let mut z = b.to_vec();
        for (col, zc) in z.iter_mut().enumerate() {
            for (r, xv) in x[t].iter().enumerate() {
                *zc += xv * w_x[r][col];
            }
            for (r, hv) in h.iter().enumerate() {
                *zc += hv * w_h[r][col];
            }
        }
        for u in 0..hidden {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[hidden + u]);
            let g = z[2 * hidden + u].tanh();
            let o = sigmoid(z[3 * hidden + u]);
            c[u] = f * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        out[t] = h.clone();
    }
    out
}

/// Additive attention over `h` (`[T][D]`): returns `(alpha, context)`.
pub fn attention(h: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = b.len();
    let scores: Vec<f64> = h
        .iter()
        .map(|ht| {
            (0..a)
                .map(|j| {
                    let mut e = b[j];
                    for (r, v) in ht.iter().enumerate() {
                        e += v * w[r][j];
                    }
                    e.tanh() * z[j]
                })
                .sum()
        })
        .collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut context = vec![0.0; h[0].len()];
    for (t, ht) in h.iter().enumerate() {
        for (k, v) in ht.iter().enumerate() {
            context[k] += alpha[t] * v;
        }
    }
    (alpha, context)
}

/// Chi-square(1) survival function by Simpson quadrature of the density,
/// after substituting `t = u²` to remove the singularity at zero:
/// `P(X > x) = 2 ∫_{√x}^{∞} φ(u) du`.
pub fn chi2_1_sf(x: f64) -> f64 {
    let lo = x.sqrt();
    let hi = lo + 40.0;
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(lo) + phi(hi);
    for i in 1..n {
        let u = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * phi(u);
    }
    (2.0 * s * h / 3.0).min(1.0)
}

/// Two-sided exact binomial p with probabilities built by the recurrence
/// `P(k+1) = P(k)·(n−k)/(k+1)`.
pub fn binomial_two_sided(b: u64, c: u64) -> f64 {
    let n = b + c;
    let lo = b.min(c);
    let mut pk = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for k in 0..=lo {
        tail += pk;
        pk *= (n - k) as f64 / (k + 1) as f64;
    }
    (2.0 * tail).min(1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Bias-corrected Adam on a scalar, step by step.
pub fn adam_scalar(
    theta0: f64,
    grad: impl Fn(f64) -> f64,
    steps: usize,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut trace = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(theta);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        trace.push(theta);
    }
    trace
}
