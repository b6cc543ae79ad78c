// Brute-force reference implementations shared by the integration and
// acceptance tests. Deliberately loop-based and allocation-happy.

/// `relu(sum_r sum_c W[r][c] * E[t*s + r][c] + b)` for every full window.
pub fn naive_convolve(e: &[Vec<f64>], w: &[Vec<f64>], b: f64, stride: usize) -> Vec<f64> {
    let h = w.len();
    let mut out = Vec::new();
    let mut t = 0;
    while t * stride + h <= e.len() {
        let mut acc = 0.0;
        for r in 0..h {
            for c in 0..w[r].len() {
                acc += w[r][c] * e[t * stride + r][c];
            }
        }
        out.push(if acc + b > 0.0 { acc + b } else { 0.0 });
        t += 1;
    }
    out
}

/// Full sort by (value desc, index asc); zero-filled top-`p` plus the mean of
/// valid entries summed in index order.
pub fn oracle_select(c: &[f64], p: usize, valid: &[bool]) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut pairs: Vec<(usize, f64)> = c.iter().copied().enumerate().filter(|&(i, _)| valid[i]).collect();
    let mut sum = 0.0;
    for &(_, v) in &pairs {
        sum += v;
    }
    let count = pairs.len();
    pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut values = vec![0.0; p + 1];
    let mut prov = vec![None; p];
    for (slot, &(i, v)) in pairs.iter().take(p).enumerate() {
        values[slot] = v;
        prov[slot] = Some(i);
    }
    if count > 0 {
        values[p] = sum / count as f64;
    }
    (values, prov)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, k) = (a.len(), b[0].len(), b.len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

/// Single-head scaled dot-product attention; returns (output, weights).
pub fn naive_attention(x: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let q = matmul(x, wq);
    let k = matmul(x, wk);
    let v = matmul(x, wv);
    let dk = wq[0].len() as f64;
    let n = x.len();
    let mut weights = vec![vec![0.0; n]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..q[i].len()).map(|c| q[i][c] * k[j][c]).sum::<f64>() / dk.sqrt())
            .collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..n {
            weights[i][j] = scores[j].exp() / denom;
        }
    }
    (matmul(&weights, &v), weights)
}

/// Multi-head block: concat heads, mix, then ReLU feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn naive_block(
    x: &[Vec<f64>],
    heads: &[(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)],
    mix: &[Vec<f64>],
    w1: &[Vec<f64>],
    b1: &[f64],
    w2: &[Vec<f64>],
    b2: &[f64],
) -> Vec<Vec<f64>> {
    let outs: Vec<Vec<Vec<f64>>> = heads.iter().map(|(q, k, v)| naive_attention(x, q, k, v).0).collect();
    let concat: Vec<Vec<f64>> = (0..x.len())
        .map(|i| outs.iter().flat_map(|o| o[i].iter().copied()).collect())
        .collect();
    let mixed = matmul(&concat, mix);
    let mut hidden = matmul(&mixed, w1);
    for row in hidden.iter_mut() {
        for (v, b) in row.iter_mut().zip(b1) {
            *v = (*v + b).max(0.0);
        }
    }
    let mut out = matmul(&hidden, w2);
    for row in out.iter_mut() {
        for (v, b) in row.iter_mut().zip(b2) {
            *v += b;
        }
    }
    out
}

/// Pairwise duplicate detection: contract `i` survives iff no earlier
/// contract has an equal key.
pub fn pairwise_survivors(keys: &[String]) -> Vec<usize> {
    (0..keys.len())
        .filter(|&i| (0..i).all(|j| keys[j] != keys[i]))
        .collect()
}
