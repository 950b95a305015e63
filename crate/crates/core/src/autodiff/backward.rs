use super::kernels::{self, Block};
use super::{Gradients, Op, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

struct Acc<'a, T: Real> {
    tape: &'a Tape<T>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Acc<'_, T> {
    /// Mutable gradient buffer for `v`, zero-initialized on first use.
    /// Returns `None` when `v` does not require a gradient.
    fn slot(&mut self, v: Var) -> Option<&mut Tensor<T>> {
        if !self.tape.requires_grad(v) {
            return None;
        }
        let shape = self.tape.shape(v);
        Some(self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn add(&mut self, v: Var, g: &[T]) {
        if let Some(slot) = self.slot(v) {
            for (a, &b) in slot.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    fn add_map(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(slot) = self.slot(v) {
            for (i, a) in slot.data_mut().iter_mut().enumerate() {
                *a += f(i);
            }
        }
    }
}

pub(super) fn run<T: Real>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    let mut acc = Acc {
        tape,
        grads: (0..tape.len()).map(|_| None).collect(),
    };
    if tape.requires_grad(loss) {
        acc.grads[loss.0] = Some(Tensor::full(tape.shape(loss), T::one()));
    }
    for i in (0..=loss.0).rev() {
        let Some(g) = acc.grads[i].take() else {
            continue;
        };
        step(&mut acc, i, &g);
        acc.grads[i] = Some(g);
    }
    Ok(Gradients { grads: acc.grads })
}

fn step<T: Real>(acc: &mut Acc<'_, T>, i: usize, g: &Tensor<T>) {
    let tape = acc.tape;
    let out = &tape.nodes[i].value;
    let gd = g.data();
    match &tape.nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b } => {
            let (av, bv) = (tape.value(a), tape.value(b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.rows();
            if tape.requires_grad(a) {
                let bt = Block::dense(bv.data(), k, n).transposed();
                let mut da = vec![T::zero(); m * k];
                kernels::matmul(gd, m, Block::dense(&bt, n, k), &mut da);
                acc.add(a, &da);
            }
            if let Some(db) = acc.slot(b) {
                kernels::matmul_at_acc(av.data(), m, k, gd, n, db.data_mut(), 0, n);
            }
        }
        &Op::MatMulT { a, b } => {
            let (av, bv) = (tape.value(a), tape.value(b));
            let (n, k) = (bv.shape()[0], bv.shape()[1]);
            let m = av.rows();
            if tape.requires_grad(a) {
                let mut da = vec![T::zero(); m * k];
                kernels::matmul(gd, m, Block::dense(bv.data(), n, k), &mut da);
                acc.add(a, &da);
            }
            if let Some(db) = acc.slot(b) {
                // db[n, k] += g^T a
                kernels::matmul_at_acc(gd, m, n, av.data(), k, db.data_mut(), 0, k);
            }
        }
        &Op::MatMulCols { a, w, start, len } => {
            let (av, wv) = (tape.value(a), tape.value(w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let m = av.rows();
            if tape.requires_grad(a) {
                let block = Block {
                    data: wv.data(),
                    offset: start,
                    stride: n,
                    rows: k,
                    cols: len,
                };
                let bt = block.transposed();
                let mut da = vec![T::zero(); m * k];
                kernels::matmul(gd, m, Block::dense(&bt, len, k), &mut da);
                acc.add(a, &da);
            }
            if let Some(dw) = acc.slot(w) {
                kernels::matmul_at_acc(av.data(), m, k, gd, len, dw.data_mut(), start, n);
            }
        }
        &Op::MatMulRows { a, w, start, len } => {
            let (av, wv) = (tape.value(a), tape.value(w));
            let n = wv.shape()[1];
            let m = av.rows();
            if tape.requires_grad(a) {
                let block = Block {
                    data: wv.data(),
                    offset: start * n,
                    stride: n,
                    rows: len,
                    cols: n,
                };
                let bt = block.transposed();
                let mut da = vec![T::zero(); m * len];
                kernels::matmul(gd, m, Block::dense(&bt, n, len), &mut da);
                acc.add(a, &da);
            }
            if let Some(dw) = acc.slot(w) {
                kernels::matmul_at_acc(av.data(), m, len, gd, n, dw.data_mut(), start * n, n);
            }
        }
        &Op::Add { a, b } => {
            acc.add(a, gd);
            acc.add(b, gd);
        }
        &Op::Sub { a, b } => {
            acc.add(a, gd);
            acc.add_map(b, |j| -gd[j]);
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (tape.value(a).data(), tape.value(b).data());
            acc.add_map(a, |j| gd[j] * bv[j]);
            acc.add_map(b, |j| gd[j] * av[j]);
        }
        &Op::Scale { a, c } => acc.add_map(a, |j| gd[j] * c),
        &Op::RowScale { x, s } => {
            let (xv, sv) = (tape.value(x), tape.value(s).data());
            let d = xv.cols();
            acc.add_map(x, |j| gd[j] * sv[j / d]);
            if tape.requires_grad(s) {
                let ds: Vec<T> = xv
                    .data()
                    .chunks(d)
                    .zip(gd.chunks(d))
                    .map(|(xr, gr)| xr.iter().zip(gr).fold(T::zero(), |a, (&x, &g)| a + x * g))
                    .collect();
                acc.add(s, &ds);
            }
        }
        &Op::Silu { x } => {
            let xv = tape.value(x).data();
            acc.add_map(x, |j| {
                let s = kernels::sigmoid(xv[j]);
                gd[j] * (s + xv[j] * s * (T::one() - s))
            });
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (x, gain) = (*x, *gain);
            let (xv, gv) = (tape.value(x), tape.value(gain).data());
            let d = xv.cols();
            let dt = T::from_usize(d);
            if tape.requires_grad(x) {
                let mut dx = vec![T::zero(); xv.numel()];
                for (r, ((xr, gr), dxr)) in xv
                    .data()
                    .chunks(d)
                    .zip(gd.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let ir = inv_rms[r];
                    let dot = xr
                        .iter()
                        .zip(gr)
                        .zip(gv)
                        .fold(T::zero(), |a, ((&xi, &gi), &wi)| a + gi * wi * xi);
                    let c = ir * ir * ir * dot / dt;
                    for j in 0..d {
                        dxr[j] = ir * gv[j] * gr[j] - c * xr[j];
                    }
                }
                acc.add(x, &dx);
            }
            if let Some(dg) = acc.slot(gain) {
                let dg = dg.data_mut();
                for (r, (xr, gr)) in xv.data().chunks(d).zip(gd.chunks(d)).enumerate() {
                    for j in 0..d {
                        dg[j] += gr[j] * xr[j] * inv_rms[r];
                    }
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let shape = out.shape();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot = (0..len).fold(T::zero(), |a, j| a + y[at(j)] * gd[at(j)]);
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            acc.add(x, &dx);
        }
        Op::Embedding { table, ids } => {
            let table = *table;
            if let Some(dt) = acc.slot(table) {
                let d = dt.cols();
                let dt = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }
        }
        Op::CausalAttention { q, k, v, heads, probs } => {
            attention_backward(acc, (*q, *k, *v), *heads, probs, gd);
        }
        Op::CrossEntropy {
            logits,
            targets,
            count,
            probs,
        } => {
            let logits = *logits;
            let vocab = tape.value(logits).cols();
            let scale = gd[0] / T::from_usize(*count);
            if let Some(dl) = acc.slot(logits) {
                let dl = dl.data_mut();
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(tgt) = *tgt else { continue };
                    for c in 0..vocab {
                        let onehot = if c == tgt { T::one() } else { T::zero() };
                        dl[r * vocab + c] += scale * (probs[r * vocab + c] - onehot);
                    }
                }
            }
        }
        &Op::Sum { x } => acc.add_map(x, |_| gd[0]),
        &Op::Mean { x } => {
            let n = T::from_usize(tape.value(x).numel());
            acc.add_map(x, |_| gd[0] / n);
        }
        &Op::Reshape { x } => acc.add(x, gd),
        Op::GatherRows { x, rows } => {
            let x = *x;
            if let Some(dx) = acc.slot(x) {
                let d = dx.cols();
                let dx = dx.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (a, &b) in dx[r * d..(r + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                        *a += b;
                    }
                }
            }
        }
        Op::ScatterAddRows { src, rows } => {
            let src = *src;
            let d = out.cols();
            if let Some(ds) = acc.slot(src) {
                let ds = ds.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (a, &b) in ds[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }
        }
        Op::ScatterRows { base, src, rows } => {
            let (base, src) = (*base, *src);
            let d = out.cols();
            if tape.requires_grad(base) {
                let mut db = gd.to_vec();
                for &r in rows {
                    db[r * d..(r + 1) * d].fill(T::zero());
                }
                acc.add(base, &db);
            }
            if let Some(ds) = acc.slot(src) {
                let ds = ds.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (a, &b) in ds[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }
        }
        Op::GatherEntries { x, entries } => {
            let x = *x;
            if let Some(dx) = acc.slot(x) {
                let c = dx.cols();
                let dx = dx.data_mut();
                for (i, &(r, k)) in entries.iter().enumerate() {
                    dx[r * c + k] += gd[i];
                }
            }
        }
        Op::TopKRenorm { probs, selected } => {
            let probs = *probs;
            let pv = tape.value(probs);
            let n = pv.cols();
            let w = out.data();
            if let Some(dp) = acc.slot(probs) {
                let dp = dp.data_mut();
                for (r, sel) in selected.iter().enumerate() {
                    let total = sel.iter().fold(T::zero(), |a, &k| a + pv.data()[r * n + k]);
                    let dot = sel
                        .iter()
                        .fold(T::zero(), |a, &k| a + w[r * n + k] * gd[r * n + k]);
                    for &k in sel {
                        dp[r * n + k] += (gd[r * n + k] - dot) / total;
                    }
                }
            }
        }
        Op::MixStates { p, states } => {
            let p = *p;
            let pv = tape.value(p);
            let l = pv.cols();
            let d = out.cols();
            if tape.requires_grad(p) {
                let mut dp = vec![T::zero(); pv.numel()];
                for (li, &s) in states.iter().enumerate() {
                    let sv = tape.value(s);
                    for (r, (sr, gr)) in sv.data().chunks(d).zip(gd.chunks(d)).enumerate() {
                        dp[r * l + li] = sr.iter().zip(gr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    }
                }
                acc.add(p, &dp);
            }
            for (li, &s) in states.iter().enumerate() {
                acc.add_map(s, |j| pv.data()[(j / d) * l + li] * gd[j]);
            }
        }
        &Op::ExpectedIndex { p } => {
            let l = tape.value(p).cols();
            acc.add_map(p, |j| gd[j / l] * T::from_usize(j % l + 1));
        }
        &Op::ComplementRatio { x, c } => acc.add_map(x, |j| -gd[j] / c),
        Op::LoadBalance { probs, fractions } => {
            let probs = *probs;
            let pv = tape.value(probs);
            let n = pv.cols();
            let coef = gd[0] * T::from_usize(n) / T::from_usize(pv.rows());
            acc.add_map(probs, |j| coef * fractions[j % n]);
        }
    }
}

fn attention_backward<T: Real>(
    acc: &mut Acc<'_, T>,
    (q, k, v): (Var, Var, Var),
    heads: usize,
    probs: &[T],
    gd: &[T],
) {
    let tape = acc.tape;
    let (b, t, d) = {
        let s = tape.shape(q);
        (s[0], s[1], s[2])
    };
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut dq = vec![T::zero(); b * t * d];
    let mut dk = vec![T::zero(); b * t * d];
    let mut dv = vec![T::zero(); b * t * d];
    let mut dp = vec![T::zero(); t];
    for bi in 0..b {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let prow = &probs[((bi * heads + h) * t + i) * t..][..t];
                let go = &gd[(bi * t + i) * d + off..][..dh];
                for j in 0..=i {
                    let vj = &vd[(bi * t + j) * d + off..][..dh];
                    dp[j] = go.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    for (dvj, &g) in dv[(bi * t + j) * d + off..][..dh].iter_mut().zip(go) {
                        *dvj += prow[j] * g;
                    }
                }
                let dot = (0..=i).fold(T::zero(), |a, j| a + prow[j] * dp[j]);
                let qi = &qd[(bi * t + i) * d + off..][..dh];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let kj = &kd[(bi * t + j) * d + off..][..dh];
                    for (dqi, &kv) in dq[(bi * t + i) * d + off..][..dh].iter_mut().zip(kj) {
                        *dqi += ds * kv;
                    }
                    for (dkj, &qv) in dk[(bi * t + j) * d + off..][..dh].iter_mut().zip(qi) {
                        *dkj += ds * qv;
                    }
                }
            }
        }
    }
    acc.add(q, &dq);
    acc.add(k, &dk);
    acc.add(v, &dv);
}
