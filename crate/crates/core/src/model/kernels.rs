//! Dense row-major kernels shared by the forward and backward passes.

/// `out = x · w` for `x: n×k`, `w: k×m`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.fill(0.0);
    for (xi, oi) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (&a, wp) in xi.iter().zip(w.chunks_exact(m)) {
            for (o, &b) in oi.iter_mut().zip(wp) {
                *o += a * b;
            }
        }
    }
}

/// `out = x · w + bias` (bias broadcast over rows).
pub fn linear(x: &[f64], w: &[f64], bias: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    matmul(x, w, n, k, m, &mut out);
    for row in out.chunks_exact_mut(m) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

/// `dw += xᵀ · dy` and `db += Σ_rows dy`.
pub fn linear_backward_params(
    x: &[f64],
    dy: &[f64],
    k: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for (xi, di) in x.chunks_exact(k).zip(dy.chunks_exact(m)) {
        for (&a, dwp) in xi.iter().zip(dw.chunks_exact_mut(m)) {
            if a == 0.0 {
                continue;
            }
            for (g, &d) in dwp.iter_mut().zip(di) {
                *g += a * d;
            }
        }
        for (g, &d) in db.iter_mut().zip(di) {
            *g += d;
        }
    }
}

/// `dx += dy · wᵀ` for `dy: n×m`, `w: k×m`.
pub fn linear_backward_input(dy: &[f64], w: &[f64], k: usize, m: usize, dx: &mut [f64]) {
    for (di, dxi) in dy.chunks_exact(m).zip(dx.chunks_exact_mut(k)) {
        for (o, wp) in dxi.iter_mut().zip(w.chunks_exact(m)) {
            *o += di.iter().zip(wp).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    shift: &[f64],
    e: usize,
    eps: f64,
) -> (Vec<f64>, LnCache) {
    let n = x.len() / e;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * e..(r + 1) * e];
        let mean = row.iter().sum::<f64>() / e as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..e {
            let h = (row[c] - mean) * rs;
            xhat[r * e + c] = h;
            out[r * e + c] = h * gain[c] + shift[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, `dgain`, `dshift`.
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    e: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
    dshift: &mut [f64],
) {
    let inv_e = 1.0 / e as f64;
    let mut dxhat = vec![0.0; e];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * e..(r + 1) * e];
        let xh = &cache.xhat[r * e..(r + 1) * e];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..e {
            dgain[c] += dyr[c] * xh[c];
            dshift[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d *= inv_e;
        mean_dx *= inv_e;
        for c in 0..e {
            dx[r * e + c] += rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut out = [0.0; 6];
        matmul(&x, &w, 2, 2, 3, &mut out);
        assert_eq!(out, [1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0, 2.0, -3.0, 1000.0]);
        let s: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
