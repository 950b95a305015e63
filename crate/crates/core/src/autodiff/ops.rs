use super::kernels::{self, Block};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-empty shape") = last;
    s
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn count(&mut self, m: usize, k: usize, n: usize) {
        self.flops += 2 * (m * k * n) as u64;
    }

    fn matrix(&self, op: &'static str, w: Var) -> Result<(usize, usize)> {
        match *self.shape(w) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, self.shape(w), &[])),
        }
    }

    /// `a[.., m, k] x b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, n) = self.matrix("matmul", b)?;
        let av = self.value(a);
        if av.cols() != k {
            return Err(Error::shape("matmul", av.shape(), self.shape(b)));
        }
        let m = av.rows();
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(av.data(), m, Block::dense(self.value(b).data(), k, n), &mut out);
        let value = Tensor::new(&with_last(av.shape(), n), out)?;
        self.count(m, k, n);
        Ok(self.push(value, &[a, b], || Op::MatMul { a, b }))
    }

    /// `a[.., m, k] x b[n, k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix("matmul_t", b)?;
        let av = self.value(a);
        if av.cols() != k {
            return Err(Error::shape("matmul_t", av.shape(), self.shape(b)));
        }
        let m = av.rows();
        let bt = Block::dense(self.value(b).data(), n, k).transposed();
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(av.data(), m, Block::dense(&bt, k, n), &mut out);
        let value = Tensor::new(&with_last(av.shape(), n), out)?;
        self.count(m, k, n);
        Ok(self.push(value, &[a, b], || Op::MatMulT { a, b }))
    }

    /// `a x w[:, start..start + len]`, reading the column block in place.
    pub fn matmul_cols(&mut self, a: Var, w: Var, start: usize, len: usize) -> Result<Var> {
        let (k, n) = self.matrix("matmul_cols", w)?;
        let av = self.value(a);
        if av.cols() != k || len == 0 || start + len > n {
            return Err(Error::shape("matmul_cols", av.shape(), &[k, start, len]));
        }
        let m = av.rows();
        let block = Block {
            data: self.value(w).data(),
            offset: start,
            stride: n,
            rows: k,
            cols: len,
        };
        let mut out = vec![T::zero(); m * len];
        kernels::matmul(av.data(), m, block, &mut out);
        let value = Tensor::new(&with_last(av.shape(), len), out)?;
        self.count(m, k, len);
        Ok(self.push(value, &[a, w], || Op::MatMulCols { a, w, start, len }))
    }

    /// `a x w[start..start + len, :]`, reading the row block in place.
    pub fn matmul_rows(&mut self, a: Var, w: Var, start: usize, len: usize) -> Result<Var> {
        let (r, n) = self.matrix("matmul_rows", w)?;
        let av = self.value(a);
        if av.cols() != len || len == 0 || start + len > r {
            return Err(Error::shape("matmul_rows", av.shape(), &[r, start, len]));
        }
        let m = av.rows();
        let block = Block {
            data: self.value(w).data(),
            offset: start * n,
            stride: n,
            rows: len,
            cols: n,
        };
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(av.data(), m, block, &mut out);
        let value = Tensor::new(&with_last(av.shape(), n), out)?;
        self.count(m, len, n);
        Ok(self.push(value, &[a, w], || Op::MatMulRows { a, w, start, len }))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], || Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], || Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, &[a], || Op::Scale { a, c })
    }

    /// Multiplies every row of `x` (all axes but the last) by the matching
    /// entry of `s`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != xv.rows() {
            return Err(Error::shape("row_scale", xv.shape(), sv.shape()));
        }
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, &c) in data.chunks_mut(d).zip(sv.data()) {
            for v in row {
                *v *= c;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, &[x, s], || Op::RowScale { x, s }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(value, &[x], || Op::Silu { x })
    }

    /// Root-mean-square normalization over the last axis, scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.shape() != [d] {
            return Err(Error::shape("rms_norm", xv.shape(), gv.shape()));
        }
        let dt = T::from_usize(d);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dt;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * r * g));
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, &[x, gain], || Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = xv.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / total;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[x], || Op::Softmax { x, axis }))
    }

    /// Row lookup into `table[V, d]`; the output shape is `prefix + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("embedding", table)?;
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", prefix, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::new(&shape, data)?;
        let ids = ids.to_vec();
        Ok(self.push(value, &[table], || Op::Embedding { table, ids }))
    }

    /// Multi-head scaled dot-product attention with a causal mask over the
    /// sequence axis of `[B, T, d]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (b, t, d) = match *self.shape(q) {
            [b, t, d] => (b, t, d),
            _ => return Err(Error::shape("causal_attention", self.shape(q), &[])),
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "{heads} heads do not divide model width {d}"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qd[(bi * t + i) * d + off..][..dh];
                    let prow = &mut probs[((bi * heads + h) * t + i) * t..][..t];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &kd[(bi * t + j) * d + off..][..dh];
                        let s = qi.iter().zip(kj).fold(T::zero(), |acc, (&x, &y)| acc + x * y) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for p in prow[..=i].iter_mut() {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    let orow = &mut out[(bi * t + i) * d + off..][..dh];
                    for j in 0..=i {
                        prow[j] = prow[j] / total;
                        let vj = &vd[(bi * t + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += prow[j] * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, t, d], out)?;
        Ok(self.push(value, &[q, k, v], || Op::CausalAttention {
            q,
            k,
            v,
            heads,
            probs,
        }))
    }

    /// Mean cross entropy over the rows of `logits[.., V]` that have a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if targets.len() != lv.rows() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross entropy over zero targets"));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            if tgt >= vocab {
                return Err(Error::contract(format!(
                    "target {tgt} out of range for vocabulary of {vocab}"
                )));
            }
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = T::zero();
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p = *p / z;
            }
            total += z.ln() + max - row[tgt];
        }
        let value = Tensor::scalar(total / T::from_usize(count));
        let targets = targets.to_vec();
        Ok(self.push(value, &[logits], || Op::CrossEntropy {
            logits,
            targets,
            count,
            probs,
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], || Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::from_usize(xv.numel()));
        self.push(value, &[x], || Op::Mean { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], || Op::Reshape { x }))
    }

    /// Selects rows of `x` (flattened to `[rows, d]`) into a `[n, d]` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::shape("gather_rows", xv.shape(), &[rows.len()]));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(&[rows.len(), d], data)?;
        let rows = rows.to_vec();
        Ok(self.push(value, &[x], || Op::GatherRows { x, rows }))
    }

    /// Zero tensor of `shape` with row `rows[i]` set to row `i` of `src`.
    pub fn scatter_add_rows(&mut self, src: Var, rows: &[usize], shape: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let mut value = Tensor::zeros(shape);
        let d = value.cols();
        if sv.cols() != d || sv.rows() != rows.len() || rows.iter().any(|&r| r >= value.rows()) {
            return Err(Error::shape("scatter_add_rows", sv.shape(), shape));
        }
        let out = value.data_mut();
        for (i, &r) in rows.iter().enumerate() {
            for (o, &s) in out[r * d..(r + 1) * d].iter_mut().zip(sv.row(i)) {
                *o += s;
            }
        }
        let rows = rows.to_vec();
        Ok(self.push(value, &[src], || Op::ScatterAddRows { src, rows }))
    }

    /// Copy of `base` with row `rows[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        let d = bv.cols();
        if sv.cols() != d || sv.rows() != rows.len() || rows.iter().any(|&r| r >= bv.rows()) {
            return Err(Error::shape("scatter_rows", bv.shape(), sv.shape()));
        }
        let mut value = bv.clone();
        let out = value.data_mut();
        for (i, &r) in rows.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(sv.row(i));
        }
        let rows = rows.to_vec();
        Ok(self.push(value, &[base, src], || Op::ScatterRows { base, src, rows }))
    }

    /// Picks `x[row, col]` for each entry of a 2-D view of `x`.
    pub fn gather_entries(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if entries.is_empty() || entries.iter().any(|&(r, k)| r >= xv.rows() || k >= c) {
            return Err(Error::shape("gather_entries", xv.shape(), &[entries.len()]));
        }
        let data = entries.iter().map(|&(r, k)| xv.data()[r * c + k]).collect();
        let value = Tensor::new(&[entries.len()], data)?;
        let entries = entries.to_vec();
        Ok(self.push(value, &[x], || Op::GatherEntries { x, entries }))
    }

    /// Keeps the `selected` columns of each row of `probs` and renormalizes
    /// them to sum to one; other columns become zero.
    pub fn topk_renorm(&mut self, probs: Var, selected: &[Vec<usize>]) -> Result<Var> {
        let pv = self.value(probs);
        let n = pv.cols();
        if selected.len() != pv.rows() {
            return Err(Error::shape("topk_renorm", pv.shape(), &[selected.len()]));
        }
        let mut value = Tensor::zeros(pv.shape());
        let out = value.data_mut();
        for (r, sel) in selected.iter().enumerate() {
            if sel.is_empty() || sel.iter().any(|&k| k >= n) {
                return Err(Error::contract("top-k selection out of range"));
            }
            let row = pv.row(r);
            let total = sel.iter().fold(T::zero(), |acc, &k| acc + row[k]);
            for &k in sel {
                out[r * n + k] = row[k] / total;
            }
        }
        let selected = selected.to_vec();
        Ok(self.push(value, &[probs], || Op::TopKRenorm { probs, selected }))
    }

    /// Per-row mixture of `states` weighted by `p[.., L]`.
    ///
    /// With `hard = Some(choice)` the forward value of row `r` is an exact
    /// copy of `states[choice[r]]` (straight-through); the backward rule is
    /// the soft mixture's in both cases.
    pub fn mix_states(&mut self, p: Var, states: &[Var], hard: Option<&[usize]>) -> Result<Var> {
        let pv = self.value(p);
        let l = pv.cols();
        if states.len() != l {
            return Err(Error::shape("mix_states", pv.shape(), &[states.len()]));
        }
        let first = self.value(states[0]);
        let (rows, d) = (first.rows(), first.cols());
        if pv.rows() != rows {
            return Err(Error::shape("mix_states", pv.shape(), first.shape()));
        }
        for &s in &states[1..] {
            self.same_shape("mix_states", states[0], s)?;
        }
        let mut out = vec![T::zero(); rows * d];
        match hard {
            Some(choice) => {
                if choice.len() != rows || choice.iter().any(|&c| c >= l) {
                    return Err(Error::contract("hard choice out of range"));
                }
                for (r, &c) in choice.iter().enumerate() {
                    out[r * d..(r + 1) * d].copy_from_slice(self.value(states[c]).row(r));
                }
            }
            None => {
                for (li, &s) in states.iter().enumerate() {
                    let sv = self.value(s);
                    for r in 0..rows {
                        let w = pv.data()[r * l + li];
                        for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(sv.row(r)) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(first.shape(), out)?;
        let mut parents = vec![p];
        parents.extend_from_slice(states);
        let states = states.to_vec();
        Ok(self.push(value, &parents, || Op::MixStates { p, states }))
    }

    /// `sum_l l * p[.., l-1]` over the last axis (1-indexed positions).
    pub fn expected_index(&mut self, p: Var) -> Var {
        let pv = self.value(p);
        let data = pv
            .data()
            .chunks(pv.cols())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(T::zero(), |acc, (i, &x)| acc + T::from_usize(i + 1) * x)
            })
            .collect();
        let value = Tensor::new(&drop_last(pv.shape()), data).expect("row count matches");
        self.push(value, &[p], || Op::ExpectedIndex { p })
    }

    /// Elementwise `(c - x) / c`.
    pub fn complement_ratio(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| (c - v) / c);
        self.push(value, &[x], || Op::ComplementRatio { x, c })
    }

    /// `N * sum_i f_i * mean_r probs[r, i]` with fixed assignment fractions `f`.
    pub fn load_balance(&mut self, probs: Var, fractions: &[T]) -> Result<Var> {
        let pv = self.value(probs);
        let n = pv.cols();
        if fractions.len() != n {
            return Err(Error::shape("load_balance", pv.shape(), &[fractions.len()]));
        }
        let rows = T::from_usize(pv.rows());
        let mut col_sum = vec![T::zero(); n];
        for row in pv.data().chunks(n) {
            for (c, &x) in col_sum.iter_mut().zip(row) {
                *c += x;
            }
        }
        let total = col_sum
            .iter()
            .zip(fractions)
            .fold(T::zero(), |acc, (&c, &f)| acc + f * (c / rows));
        let value = Tensor::scalar(T::from_usize(n) * total);
        let fractions = fractions.to_vec();
        Ok(self.push(value, &[probs], || Op::LoadBalance { probs, fractions }))
    }
}
