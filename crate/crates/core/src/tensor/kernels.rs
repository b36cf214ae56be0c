//! Raw slice kernels shared by the forward and backward passes.

pub(crate) const GELU_A: f64 = 0.797_884_560_8;
pub(crate) const GELU_B: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;

/// `out += a (m x k) * b (k x n)`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out (m x k) += g (m x n) * b^T` where `b` is `k x n`.
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out (k x n) += a^T * g` where `a` is `m x k` and `g` is `m x n`.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negative Breslow partial log-likelihood averaged over events.
///
/// Returns the loss and `d loss / d h`. The caller guarantees at least one
/// event.
pub(crate) fn cox_nll(h: &[f64], times: &[f64], events: &[bool]) -> (f64, Vec<f64>) {
    let n = h.len();
    let n_events = events.iter().filter(|&&e| e).count() as f64;
    let shift = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = h.iter().map(|v| (v - shift).exp()).collect();

    // Descending time; tied times form one block so every tie shares the
    // same risk set.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));

    let mut risk_sum = vec![0.0; n];
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && times[order[end]] == times[order[start]] {
            acc += w[order[end]];
            end += 1;
        }
        for &i in &order[start..end] {
            risk_sum[i] = acc;
        }
        start = end;
    }

    let mut loss = 0.0;
    for i in 0..n {
        if events[i] {
            loss -= h[i] - shift - risk_sum[i].ln();
        }
    }
    loss /= n_events;

    // Ascending time: subject k belongs to the risk set of every event i with
    // t_i <= t_k.
    let mut inv_acc = vec![0.0; n];
    let mut acc = 0.0;
    let mut end = n;
    while end > 0 {
        let mut start = end;
        while start > 0 && times[order[start - 1]] == times[order[end - 1]] {
            start -= 1;
            let i = order[start];
            if events[i] {
                acc += 1.0 / risk_sum[i];
            }
        }
        for &k in &order[start..end] {
            inv_acc[k] = acc;
        }
        end = start;
    }
    let grad = (0..n)
        .map(|k| {
            let delta = if events[k] { 1.0 } else { 0.0 };
            -(delta - w[k] * inv_acc[k]) / n_events
        })
        .collect();
    (loss, grad)
}
