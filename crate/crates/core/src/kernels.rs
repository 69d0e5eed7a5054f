//! Forward/backward kernels for the sequence-level ops recorded on the tape.
//!
//! Per-head quantities are packed head-major along columns: a `T × (H·n)`
//! matrix holds head `h` of step `t` in columns `[h·n, (h+1)·n)`. A run of
//! states is stored as `(T·H·n) × n`, block `(t, h)` starting at row
//! `(t·H + h)·n`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Floor under the norm used to normalize removal keys.
pub const KAPPA_NORM_FLOOR: f64 = 1e-8;

fn head_width(cols: usize, heads: usize, op: &'static str) -> Result<usize> {
    if heads == 0 || !cols.is_multiple_of(heads) {
        return Err(Error::Contract(format!("{op}: {cols} columns do not split into {heads} heads")));
    }
    Ok(cols / heads)
}

fn check_states<F: Real>(states: &Tensor<F>, t_len: usize, heads: usize, n: usize, op: &'static str) -> Result<()> {
    if states.shape() != (t_len * heads * n, n) {
        return Err(Error::shape(op, (t_len * heads * n, n), states.shape()));
    }
    Ok(())
}

/// Run `S_t = S_{t-1} · (diag(w_t) − κ̂_tᵀ(a_t ⊙ κ̂_t)) + v_tᵀ k_t` for every head.
///
/// Uses `S·diag(w) − (S κ̂ᵀ)(a ⊙ κ̂)` so each step is O(n²) per head.
pub(crate) fn state_scan<F: Real>(
    init: &Tensor<F>,
    decay: &Tensor<F>,
    kappa: &Tensor<F>,
    rate: &Tensor<F>,
    key: &Tensor<F>,
    value: &Tensor<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let (t_len, width) = decay.shape();
    let n = head_width(width, heads, "state_scan")?;
    for other in [kappa, rate, key, value] {
        if other.shape() != decay.shape() {
            return Err(Error::shape("state_scan", decay.shape(), other.shape()));
        }
    }
    if init.shape() != (heads * n, n) {
        return Err(Error::shape("state_scan init", (heads * n, n), init.shape()));
    }
    let block = n * n;
    let mut out = Tensor::zeros(t_len * heads * n, n);
    let mut ak = vec![F::zero(); n];
    for t in 0..t_len {
        let (done, rest) = out.data_mut().split_at_mut(t * heads * block);
        for h in 0..heads {
            let prev: &[F] = if t == 0 {
                &init.data()[h * block..(h + 1) * block]
            } else {
                &done[((t - 1) * heads + h) * block..((t - 1) * heads + h + 1) * block]
            };
            let cur = &mut rest[h * block..(h + 1) * block];
            let cols = h * n..(h + 1) * n;
            let w = &decay.row(t)[cols.clone()];
            let kap = &kappa.row(t)[cols.clone()];
            let a = &rate.row(t)[cols.clone()];
            let k = &key.row(t)[cols.clone()];
            let v = &value.row(t)[cols];
            for ((x, &aj), &kj) in ak.iter_mut().zip(a).zip(kap) {
                *x = aj * kj;
            }
            for ((prow, crow), &vi) in prev.chunks_exact(n).zip(cur.chunks_exact_mut(n)).zip(v) {
                let ui = dot(prow, kap);
                for ((((c, &p), &wj), &akj), &kj) in crow.iter_mut().zip(prow).zip(w).zip(&ak).zip(k) {
                    *c = p * wj - ui * akj + vi * kj;
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(crate) struct ScanGrads<F> {
    pub init: Tensor<F>,
    pub decay: Tensor<F>,
    pub kappa: Tensor<F>,
    pub rate: Tensor<F>,
    pub key: Tensor<F>,
    pub value: Tensor<F>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn state_scan_backward<F: Real>(
    init: &Tensor<F>,
    decay: &Tensor<F>,
    kappa: &Tensor<F>,
    rate: &Tensor<F>,
    key: &Tensor<F>,
    value: &Tensor<F>,
    states: &Tensor<F>,
    grad: &Tensor<F>,
    heads: usize,
) -> ScanGrads<F> {
    let (t_len, width) = decay.shape();
    let n = width / heads;
    let block = n * n;
    let mut g = ScanGrads {
        init: Tensor::zeros(heads * n, n),
        decay: Tensor::zeros(t_len, width),
        kappa: Tensor::zeros(t_len, width),
        rate: Tensor::zeros(t_len, width),
        key: Tensor::zeros(t_len, width),
        value: Tensor::zeros(t_len, width),
    };
    // gradient w.r.t. S_t flowing back from step t+1
    let mut carry = vec![F::zero(); heads * block];
    let mut gbar = vec![F::zero(); block];
    let mut u = vec![F::zero(); n];
    let mut du = vec![F::zero(); n];
    let mut db = vec![F::zero(); n];
    let mut ak = vec![F::zero(); n];
    for t in (0..t_len).rev() {
        for h in 0..heads {
            let prev: &[F] = if t == 0 {
                &init.data()[h * block..(h + 1) * block]
            } else {
                &states.data()[((t - 1) * heads + h) * block..((t - 1) * heads + h + 1) * block]
            };
            let gt = &grad.data()[(t * heads + h) * block..(t * heads + h + 1) * block];
            let carry_h = &mut carry[h * block..(h + 1) * block];
            for ((gb, &a), &b) in gbar.iter_mut().zip(gt).zip(carry_h.iter()) {
                *gb = a + b;
            }
            let cols = h * n..(h + 1) * n;
            let w = &decay.row(t)[cols.clone()];
            let kap = &kappa.row(t)[cols.clone()];
            let a = &rate.row(t)[cols.clone()];
            let k = &key.row(t)[cols.clone()];
            let v = &value.row(t)[cols.clone()];
            for ((x, &aj), &kj) in ak.iter_mut().zip(a).zip(kap) {
                *x = aj * kj;
            }
            for (ui, prow) in u.iter_mut().zip(prev.chunks_exact(n)) {
                *ui = dot(prow, kap);
            }
            db.iter_mut().for_each(|x| *x = F::zero());
            let dw = &mut g.decay.row_mut(t)[cols.clone()];
            let dk = &mut g.key.row_mut(t)[cols.clone()];
            for (i, (prow, grow)) in prev.chunks_exact(n).zip(gbar.chunks_exact(n)).enumerate() {
                let (ui, vi) = (u[i], v[i]);
                for ((((dwj, dbj), dkj), &p), &gij) in dw.iter_mut().zip(db.iter_mut()).zip(dk.iter_mut()).zip(prow).zip(grow) {
                    *dwj += gij * p;
                    *dbj -= gij * ui;
                    *dkj += gij * vi;
                }
                du[i] = -dot(grow, &ak);
            }
            let dv = &mut g.value.row_mut(t)[cols.clone()];
            for (dvi, grow) in dv.iter_mut().zip(gbar.chunks_exact(n)) {
                *dvi += dot(grow, k);
            }
            let dkap = &mut g.kappa.row_mut(t)[cols.clone()];
            for (l, d) in dkap.iter_mut().enumerate() {
                *d += db[l] * a[l];
            }
            for (&dui, prow) in du.iter().zip(prev.chunks_exact(n)) {
                for (d, &p) in dkap.iter_mut().zip(prow) {
                    *d += dui * p;
                }
            }
            let da = &mut g.rate.row_mut(t)[cols];
            for ((d, &dbl), &kl) in da.iter_mut().zip(&db).zip(kap) {
                *d += dbl * kl;
            }
            for ((crow, grow), &dui) in carry_h.chunks_exact_mut(n).zip(gbar.chunks_exact(n)).zip(&du) {
                for (((c, &gil), &wl), &kl) in crow.iter_mut().zip(grow).zip(w).zip(kap) {
                    *c = gil * wl + dui * kl;
                }
            }
        }
    }
    g.init.data_mut().copy_from_slice(&carry);
    g
}

/// Per head: `y = q · Sᵀ`.
pub(crate) fn head_readout<F: Real>(query: &Tensor<F>, states: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let (t_len, width) = query.shape();
    let n = head_width(width, heads, "head_readout")?;
    check_states(states, t_len, heads, n, "head_readout")?;
    let mut out = Tensor::zeros(t_len, width);
    for t in 0..t_len {
        for h in 0..heads {
            let s = &states.data()[(t * heads + h) * n * n..(t * heads + h + 1) * n * n];
            let q = &query.row(t)[h * n..(h + 1) * n];
            let y = &mut out.row_mut(t)[h * n..(h + 1) * n];
            for i in 0..n {
                let mut acc = F::zero();
                for l in 0..n {
                    acc += q[l] * s[i * n + l];
                }
                y[i] = acc;
            }
        }
    }
    Ok(out)
}

pub(crate) fn head_readout_backward<F: Real>(
    query: &Tensor<F>,
    states: &Tensor<F>,
    grad: &Tensor<F>,
    heads: usize,
) -> (Tensor<F>, Tensor<F>) {
    let (t_len, width) = query.shape();
    let n = width / heads;
    let mut dq = Tensor::zeros(t_len, width);
    let mut ds = Tensor::zeros(states.rows(), n);
    for t in 0..t_len {
        for h in 0..heads {
            let range = (t * heads + h) * n * n..(t * heads + h + 1) * n * n;
            let s = &states.data()[range.clone()];
            let q = &query.row(t)[h * n..(h + 1) * n];
            let g = &grad.row(t)[h * n..(h + 1) * n];
            let dqh = &mut dq.row_mut(t)[h * n..(h + 1) * n];
            for i in 0..n {
                for l in 0..n {
                    dqh[l] += g[i] * s[i * n + l];
                }
            }
            let dsh = &mut ds.data_mut()[range];
            for i in 0..n {
                for l in 0..n {
                    dsh[i * n + l] = g[i] * q[l];
                }
            }
        }
    }
    (dq, ds)
}

/// Per head: `y = x · S` (the state used as a transformation weight).
pub(crate) fn head_encode<F: Real>(input: &Tensor<F>, states: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let (t_len, width) = input.shape();
    let n = head_width(width, heads, "head_encode")?;
    check_states(states, t_len, heads, n, "head_encode")?;
    let mut out = Tensor::zeros(t_len, width);
    for t in 0..t_len {
        for h in 0..heads {
            let s = &states.data()[(t * heads + h) * n * n..(t * heads + h + 1) * n * n];
            let x = &input.row(t)[h * n..(h + 1) * n];
            let y = &mut out.row_mut(t)[h * n..(h + 1) * n];
            for i in 0..n {
                let xi = x[i];
                for (yl, &sv) in y.iter_mut().zip(&s[i * n..(i + 1) * n]) {
                    *yl += xi * sv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn head_encode_backward<F: Real>(
    input: &Tensor<F>,
    states: &Tensor<F>,
    grad: &Tensor<F>,
    heads: usize,
) -> (Tensor<F>, Tensor<F>) {
    let (t_len, width) = input.shape();
    let n = width / heads;
    let mut dx = Tensor::zeros(t_len, width);
    let mut ds = Tensor::zeros(states.rows(), n);
    for t in 0..t_len {
        for h in 0..heads {
            let range = (t * heads + h) * n * n..(t * heads + h + 1) * n * n;
            let s = &states.data()[range.clone()];
            let x = &input.row(t)[h * n..(h + 1) * n];
            let g = &grad.row(t)[h * n..(h + 1) * n];
            let dxh = &mut dx.row_mut(t)[h * n..(h + 1) * n];
            for i in 0..n {
                let mut acc = F::zero();
                for l in 0..n {
                    acc += g[l] * s[i * n + l];
                }
                dxh[i] = acc;
            }
            let dsh = &mut ds.data_mut()[range];
            for i in 0..n {
                for l in 0..n {
                    dsh[i * n + l] = x[i] * g[l];
                }
            }
        }
    }
    (dx, ds)
}

/// Per head: `y_h = x_h[..n_in] · P_h` where `P` stacks `H` blocks of `n_in × n_out`.
pub(crate) fn head_project<F: Real>(x: &Tensor<F>, proj: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let (t_len, width) = x.shape();
    let w = head_width(width, heads, "head_project")?;
    let n_in = head_width(proj.rows(), heads, "head_project")?;
    if n_in > w {
        return Err(Error::shape("head_project", x.shape(), proj.shape()));
    }
    let n_out = proj.cols();
    let mut out = Tensor::zeros(t_len, heads * n_out);
    for t in 0..t_len {
        for h in 0..heads {
            let xh = &x.row(t)[h * w..h * w + n_in];
            let y = &mut out.row_mut(t)[h * n_out..(h + 1) * n_out];
            for (i, &xi) in xh.iter().enumerate() {
                let prow = proj.row(h * n_in + i);
                for (yc, &pv) in y.iter_mut().zip(prow) {
                    *yc += xi * pv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn head_project_backward<F: Real>(
    x: &Tensor<F>,
    proj: &Tensor<F>,
    grad: &Tensor<F>,
    heads: usize,
) -> (Tensor<F>, Tensor<F>) {
    let (t_len, width) = x.shape();
    let w = width / heads;
    let n_in = proj.rows() / heads;
    let n_out = proj.cols();
    let mut dx = Tensor::zeros(t_len, width);
    let mut dp = Tensor::zeros(proj.rows(), n_out);
    for t in 0..t_len {
        for h in 0..heads {
            let g = &grad.row(t)[h * n_out..(h + 1) * n_out];
            for i in 0..n_in {
                let prow = proj.row(h * n_in + i);
                let mut acc = F::zero();
                for (&gc, &pv) in g.iter().zip(prow) {
                    acc += gc * pv;
                }
                dx.row_mut(t)[h * w + i] = acc;
                let xi = x.row(t)[h * w + i];
                for (d, &gc) in dp.row_mut(h * n_in + i).iter_mut().zip(g) {
                    *d += xi * gc;
                }
            }
        }
    }
    (dx, dp)
}

/// Per row and group: `x / max(‖x‖₂, floor)`.
pub(crate) fn l2_normalize<F: Real>(x: &Tensor<F>, groups: usize) -> Result<Tensor<F>> {
    let n = head_width(x.cols(), groups, "l2_normalize")?;
    let floor = F::of(KAPPA_NORM_FLOOR);
    let mut out = x.clone();
    for r in 0..x.rows() {
        for gidx in 0..groups {
            let seg = &mut out.row_mut(r)[gidx * n..(gidx + 1) * n];
            let norm = seg.iter().map(|&v| v * v).sum::<F>().sqrt();
            let d = norm.max(floor);
            for v in seg.iter_mut() {
                *v /= d;
            }
        }
    }
    Ok(out)
}

pub(crate) fn l2_normalize_backward<F: Real>(x: &Tensor<F>, y: &Tensor<F>, grad: &Tensor<F>, groups: usize) -> Tensor<F> {
    let n = x.cols() / groups;
    let floor = F::of(KAPPA_NORM_FLOOR);
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for gidx in 0..groups {
            let range = gidx * n..(gidx + 1) * n;
            let xs = &x.row(r)[range.clone()];
            let ys = &y.row(r)[range.clone()];
            let gs = &grad.row(r)[range.clone()];
            let norm = xs.iter().map(|&v| v * v).sum::<F>().sqrt();
            let d = &mut dx.row_mut(r)[range];
            if norm > floor {
                let proj: F = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for ((dv, &gv), &yv) in d.iter_mut().zip(gs).zip(ys) {
                    *dv = (gv - yv * proj) / norm;
                }
            } else {
                for (dv, &gv) in d.iter_mut().zip(gs) {
                    *dv = gv / floor;
                }
            }
        }
    }
    dx
}

#[inline]
fn clamp01<F: Real>(v: F) -> F {
    v.max(F::zero()).min(F::one())
}

/// `clamp(mu) ⊙ x_t + (1 − clamp(mu)) ⊙ x_{t-1}`, with `prev` standing in for `x_0`.
pub(crate) fn token_shift<F: Real>(x: &Tensor<F>, prev: &Tensor<F>, mu: &Tensor<F>) -> Result<Tensor<F>> {
    let d = x.cols();
    if prev.shape() != (1, d) || mu.shape() != (1, d) {
        return Err(Error::shape("token_shift", x.shape(), prev.shape()));
    }
    let mut out = Tensor::zeros(x.rows(), d);
    for t in 0..x.rows() {
        let before = if t == 0 { prev.row(0) } else { x.row(t - 1) };
        let cur = x.row(t);
        let o = out.row_mut(t);
        for c in 0..d {
            let m = clamp01(mu.data()[c]);
            o[c] = m * cur[c] + (F::one() - m) * before[c];
        }
    }
    Ok(out)
}

pub(crate) fn token_shift_backward<F: Real>(
    x: &Tensor<F>,
    prev: &Tensor<F>,
    mu: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = x.cols();
    let mut dx = Tensor::zeros(x.rows(), d);
    let mut dprev = Tensor::zeros(1, d);
    let mut dmu = Tensor::zeros(1, d);
    for t in 0..x.rows() {
        let before = if t == 0 { prev.row(0) } else { x.row(t - 1) };
        let g = grad.row(t);
        for c in 0..d {
            let raw = mu.data()[c];
            let m = clamp01(raw);
            dx.row_mut(t)[c] += g[c] * m;
            let back = g[c] * (F::one() - m);
            if t == 0 {
                dprev.data_mut()[c] += back;
            } else {
                dx.row_mut(t - 1)[c] += back;
            }
            if raw >= F::zero() && raw <= F::one() {
                dmu.data_mut()[c] += g[c] * (x.row(t)[c] - before[c]);
            }
        }
    }
    (dx, dprev, dmu)
}

/// Mean over rows of `−log softmax(logits)[target]`, max-subtracted.
pub(crate) fn softmax_cross_entropy<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<Tensor<F>> {
    check_targets(logits, targets)?;
    let mut total = F::zero();
    for (t, &target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        total += lse - row[target];
    }
    Ok(Tensor::scalar(total / F::of(targets.len() as f64)))
}

pub(crate) fn softmax_cross_entropy_backward<F: Real>(logits: &Tensor<F>, targets: &[usize], grad: F) -> Tensor<F> {
    let scale = grad / F::of(targets.len() as f64);
    let mut d = Tensor::zeros(logits.rows(), logits.cols());
    for (t, &target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let denom = row.iter().map(|&v| (v - max).exp()).sum::<F>();
        let drow = d.row_mut(t);
        for (dv, &v) in drow.iter_mut().zip(row) {
            *dv = (v - max).exp() / denom * scale;
        }
        drow[target] -= scale;
    }
    d
}

fn check_targets<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<()> {
    if targets.is_empty() || targets.len() != logits.rows() {
        return Err(Error::Contract(format!(
            "cross entropy needs one target per logit row: {} rows, {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Input(format!("target {bad} out of range for {} classes", logits.cols())));
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
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

pub(crate) fn gather_rows<F: Real>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows()) {
        return Err(Error::Input(format!("token id {bad} out of range for {} rows", table.rows())));
    }
    let mut out = Tensor::zeros(ids.len(), table.cols());
    for (t, &id) in ids.iter().enumerate() {
        out.row_mut(t).copy_from_slice(table.row(id));
    }
    Ok(out)
}
