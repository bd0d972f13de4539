use super::kernels::{gemm, log_sum_exp, sigmoid, softmax_rows_backward_inplace, softmax_rows_inplace, AttnGeom, Mat};
use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

fn dim_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// (rows, width) treating every leading axis as rows.
fn rows_width(shape: &[usize]) -> (usize, usize) {
    let width = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / width.max(1), width)
}

/// (outer, tokens, width) for token-axis operations on `[.., n, d]`.
fn token_geom(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let r = shape.len();
    Some((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// `b` tiles `a` when its shape, with leading unit axes removed, is a suffix
/// of `a`'s shape (bias rows over `[.., d]`, a table over `[B, n, d]`).
fn tiles(a: &[usize], b: &[usize]) -> bool {
    let core: &[usize] = {
        let first = b.iter().position(|&e| e != 1).unwrap_or(b.len());
        &b[first..]
    };
    core.len() <= a.len() && a[a.len() - core.len()..] == *core
}

impl<T: Scalar> Tape<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), &a.data(), Mat::dense(m, k), &b.data(), Mat::dense(k, n), T::zero(), &mut out, Mat::dense(m, n));
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.record(
            vec![m, n],
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut r = vec![T::zero(); m * k];
                    gemm(T::one(), g, Mat::dense(m, n), &bc.data(), Mat::dense(k, n).t(), T::zero(), &mut r, Mat::dense(m, k));
                    r
                });
                let gb = needs[1].then(|| {
                    let mut r = vec![T::zero(); k * n];
                    gemm(T::one(), &ac.data(), Mat::dense(m, k).t(), g, Mat::dense(m, n), T::zero(), &mut r, Mat::dense(k, n));
                    r
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum. `b` may also be a bias row (or table) that tiles `a`.
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() == b.shape() {
            let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
            return Ok(self.record(
                a.shape().to_vec(),
                out,
                &[a, b],
                Box::new(|g, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
            ));
        }
        if !tiles(a.shape(), b.shape()) {
            return Err(dim_err("add", a, b));
        }
        let period = b.numel();
        let mut out = a.to_vec();
        {
            let bd = b.data();
            for chunk in out.chunks_exact_mut(period) {
                chunk.iter_mut().zip(bd.iter()).for_each(|(o, &v)| *o += v);
            }
        }
        Ok(self.record(
            a.shape().to_vec(),
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); period];
                    for chunk in g.chunks_exact(period) {
                        acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                    }
                    acc
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(dim_err("mul", a, b));
        }
        let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.record(
            a.shape().to_vec(),
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(bc.data().iter()).map(|(&g, &y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(ac.data().iter()).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, x: &Tensor<T>, c: T) -> Tensor<T> {
        let out = x.data().iter().map(|&v| v * c).collect();
        self.record(
            x.shape().to_vec(),
            out,
            &[x],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Tensor<T> {
        let s: T = x.data().iter().copied().sum();
        let n = x.numel();
        self.record(vec![1], vec![s], &[x], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.record(shape.to_vec(), x.to_vec(), &[x], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// Stacks `batch` copies of `x` along a new leading axis. Gradients from
    /// every copy sum into `x`.
    pub fn replicate(&self, x: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        if batch == 0 {
            return Err(Error::Validation("replicate: batch must be positive".into()));
        }
        let src = x.to_vec();
        let n = src.len();
        let mut out = Vec::with_capacity(n * batch);
        for _ in 0..batch {
            out.extend_from_slice(&src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(x.shape());
        Ok(self.record(
            shape,
            out,
            &[x],
            Box::new(move |g, _| {
                let mut acc = vec![T::zero(); n];
                for chunk in g.chunks_exact(n) {
                    acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                vec![Some(acc)]
            }),
        ))
    }

    /// Stacks token rows (axis -2) of every part in argument order.
    pub fn concat_tokens(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat_tokens: no parts".into()))?;
        let (outer, _, width) = token_geom(first.shape()).ok_or_else(|| dim_err("concat_tokens", first, first))?;
        let lead = &first.shape()[..first.rank() - 2];
        let mut counts = Vec::with_capacity(parts.len());
        for p in parts {
            match token_geom(p.shape()) {
                Some((o, n, w)) if o == outer && w == width && &p.shape()[..p.rank() - 2] == lead => counts.push(n),
                _ => return Err(dim_err("concat_tokens", first, p)),
            }
        }
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(outer * total * width);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (view, &n) in views.iter().zip(&counts) {
                    out.extend_from_slice(&view[o * n * width..(o + 1) * n * width]);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([total, width]);
        Ok(self.record(
            shape,
            out,
            parts,
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<T>>> = needs
                    .iter()
                    .zip(&counts)
                    .map(|(&need, &n)| need.then(|| Vec::with_capacity(outer * n * width)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (grad, &n) in grads.iter_mut().zip(&counts) {
                        if let Some(buf) = grad {
                            buf.extend_from_slice(&g[pos..pos + n * width]);
                        }
                        pos += n * width;
                    }
                }
                grads
            }),
        ))
    }

    /// Rows `from .. from + count` of the token axis (axis -2).
    pub fn slice_tokens(&self, x: &Tensor<T>, from: usize, count: usize) -> Result<Tensor<T>> {
        let (outer, n, width) = token_geom(x.shape()).ok_or_else(|| dim_err("slice_tokens", x, x))?;
        if count == 0 || from + count > n {
            return Err(Error::Index {
                op: "slice_tokens",
                index: from + count,
                extent: n,
            });
        }
        let mut out = Vec::with_capacity(outer * count * width);
        {
            let d = x.data();
            for o in 0..outer {
                let start = (o * n + from) * width;
                out.extend_from_slice(&d[start..start + count * width]);
            }
        }
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = count;
        Ok(self.record(
            shape,
            out,
            &[x],
            Box::new(move |g, _| {
                let mut full = vec![T::zero(); outer * n * width];
                for o in 0..outer {
                    let start = (o * n + from) * width;
                    full[start..start + count * width].copy_from_slice(&g[o * count * width..(o + 1) * count * width]);
                }
                vec![Some(full)]
            }),
        ))
    }

    /// `x·Wᵀ + b` with `x: [.., d_in]`, `W: [d_out, d_in]`, `b: [1, d_out]`.
    pub fn linear(&self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, din) = rows_width(x.shape());
        if w.rank() != 2 || w.shape()[1] != din {
            return Err(dim_err("linear", x, w));
        }
        let dout = w.shape()[0];
        if b.numel() != dout {
            return Err(dim_err("linear", w, b));
        }
        let mut out = Vec::with_capacity(rows * dout);
        {
            let bd = b.data();
            for _ in 0..rows {
                out.extend_from_slice(&bd);
            }
        }
        gemm(T::one(), &x.data(), Mat::dense(rows, din), &w.data(), Mat::dense(dout, din).t(), T::one(), &mut out, Mat::dense(rows, dout));
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let (xc, wc) = (x.clone(), w.clone());
        Ok(self.record(
            shape,
            out,
            &[x, w, b],
            Box::new(move |g, needs| {
                let gm = Mat::dense(rows, dout);
                let gx = needs[0].then(|| {
                    let mut r = vec![T::zero(); rows * din];
                    gemm(T::one(), g, gm, &wc.data(), Mat::dense(dout, din), T::zero(), &mut r, Mat::dense(rows, din));
                    r
                });
                let gw = needs[1].then(|| {
                    let mut r = vec![T::zero(); dout * din];
                    gemm(T::one(), g, gm.t(), &xc.data(), Mat::dense(rows, din), T::zero(), &mut r, Mat::dense(dout, din));
                    r
                });
                let gb = needs[2].then(|| {
                    let mut acc = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Per-row standardization over the last axis, then `γ·x̂ + β`.
    pub fn layer_norm(&self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (rows, d) = rows_width(x.shape());
        if d < 2 {
            return Err(Error::Validation(format!("layer_norm needs width >= 2, got {d}")));
        }
        if gamma.numel() != d {
            return Err(dim_err("layer_norm", x, gamma));
        }
        if beta.numel() != d {
            return Err(dim_err("layer_norm", x, beta));
        }
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        {
            let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
            let dn = T::lit(d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gd[j] + bd[j];
                }
            }
        }
        let gc = gamma.clone();
        Ok(self.record(
            x.shape().to_vec(),
            out,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = gc.data();
                let dn = T::lit(d as f64);
                let gx = needs[0].then(|| {
                    let mut r = vec![T::zero(); rows * d];
                    let mut dxhat = vec![T::zero(); d];
                    for row in 0..rows {
                        let gr = &g[row * d..(row + 1) * d];
                        let hr = &xhat[row * d..(row + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            r[row * d + j] = inv_std[row] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    r
                });
                let ggamma = needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                    acc
                });
                let gbeta = needs[2].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for gr in g.chunks_exact(d) {
                        acc.iter_mut().zip(gr).for_each(|(a, &v)| *a += v);
                    }
                    acc
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_rows(&self, x: &Tensor<T>) -> Tensor<T> {
        let (_, m) = rows_width(x.shape());
        let mut out = x.to_vec();
        softmax_rows_inplace(&mut out, m);
        let saved = out.clone();
        self.record(
            x.shape().to_vec(),
            out,
            &[x],
            Box::new(move |g, _| {
                let mut r = g.to_vec();
                softmax_rows_backward_inplace(&saved, &mut r, m);
                vec![Some(r)]
            }),
        )
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = T::lit(0.044715);
        let half = T::lit(0.5);
        let out = x
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let xc = x.clone();
        self.record(
            x.shape().to_vec(),
            out,
            &[x],
            Box::new(move |g, _| {
                let three = T::lit(3.0);
                let r = g
                    .iter()
                    .zip(xc.data().iter())
                    .map(|(&g, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        g * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                vec![Some(r)]
            }),
        )
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Tensor<T> {
        let out: Vec<T> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let saved = out.clone();
        self.record(
            x.shape().to_vec(),
            out,
            &[x],
            Box::new(move |g, _| vec![Some(g.iter().zip(&saved).map(|(&g, &s)| g * s * (T::one() - s)).collect())]),
        )
    }

    /// Multi-head scaled dot-product self-attention core,
    /// `softmax(Q_h·K_hᵀ/√(d/h))·V_h` per head, over `[.., n, d]` operands.
    pub fn attention(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
        if q.shape() != k.shape() {
            return Err(dim_err("attention", q, k));
        }
        if q.shape() != v.shape() {
            return Err(dim_err("attention", q, v));
        }
        let (batch, n, d) = token_geom(q.shape()).ok_or_else(|| dim_err("attention", q, k))?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Validation(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let geom = AttnGeom { batch, n, d, heads };
        let (out, probs) = geom.forward(&q.data(), &k.data(), &v.data());
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        Ok(self.record(
            q.shape().to_vec(),
            out,
            &[q, k, v],
            Box::new(move |g, needs| {
                let (dq, dk, dv) = geom.backward(&qc.data(), &kc.data(), &vc.data(), &probs, g);
                vec![needs[0].then_some(dq), needs[1].then_some(dk), needs[2].then_some(dv)]
            }),
        ))
    }

    /// Batch-mean of `−Σ_c target·log softmax(logits)` for `[B, C]` operands
    /// with row-stochastic targets.
    pub fn cross_entropy_soft(&self, logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if logits.rank() != 2 || logits.shape() != target.shape() {
            return Err(dim_err("cross_entropy_soft", logits, target));
        }
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let tol = T::lit(1e-5);
        {
            let td = target.data();
            for (i, row) in td.chunks_exact(c).enumerate() {
                let s: T = row.iter().copied().sum();
                if row.iter().any(|&v| v < T::zero() || !v.is_finite()) || (s - T::one()).abs() > tol {
                    return Err(Error::Validation(format!(
                        "cross_entropy_soft: target row {i} is not a probability vector (sum {s})"
                    )));
                }
            }
        }
        let mut loss = T::zero();
        let mut probs = logits.to_vec();
        {
            let (ld, td) = (logits.data(), target.data());
            for i in 0..b {
                let row = &ld[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                for j in 0..c {
                    loss -= td[i * c + j] * (row[j] - lse);
                }
            }
        }
        softmax_rows_inplace(&mut probs, c);
        let bn = T::lit(b as f64);
        let tc = target.clone();
        Ok(self.record(
            vec![1],
            vec![loss / bn],
            &[logits, target],
            Box::new(move |g, needs| {
                let scale = g[0] / bn;
                let td = tc.data();
                let gl = needs[0].then(|| {
                    let mut r = vec![T::zero(); b * c];
                    for i in 0..b {
                        let mass: T = td[i * c..(i + 1) * c].iter().copied().sum();
                        for j in 0..c {
                            r[i * c + j] = scale * (probs[i * c + j] * mass - td[i * c + j]);
                        }
                    }
                    r
                });
                vec![gl, None]
            }),
        ))
    }

    /// Batch-mean binary cross-entropy of `sigmoid(p)` against `{0, 1}`
    /// targets, in the stable form `max(p,0) − p·t + ln(1 + e^{−|p|})`.
    pub fn bce_with_logits(&self, p: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if p.shape() != target.shape() {
            return Err(dim_err("bce_with_logits", p, target));
        }
        if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::Validation("bce_with_logits: targets must be 0 or 1".into()));
        }
        let n = p.numel();
        let loss: T = p
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let nn = T::lit(n as f64);
        let (pc, tc) = (p.clone(), target.clone());
        Ok(self.record(
            vec![1],
            vec![loss / nn],
            &[p, target],
            Box::new(move |g, needs| {
                let scale = g[0] / nn;
                let gp = needs[0].then(|| {
                    pc.data()
                        .iter()
                        .zip(tc.data().iter())
                        .map(|(&x, &t)| scale * (sigmoid(x) - t))
                        .collect()
                });
                vec![gp, None]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_rule() {
        assert!(tiles(&[2, 3], &[1, 3]));
        assert!(tiles(&[4, 64, 8], &[64, 8]));
        assert!(tiles(&[4, 64, 8], &[8]));
        assert!(!tiles(&[2, 3], &[2, 1]));
        assert!(!tiles(&[2, 3], &[3, 3]));
    }

    #[test]
    fn slice_out_of_range_is_index_error() {
        let tape = Tape::<f64>::new();
        let t = Tensor::zeros(&[4, 2]);
        assert!(matches!(tape.slice_tokens(&t, 3, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn concat_width_mismatch_is_dimension_error() {
        let tape = Tape::<f64>::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(matches!(tape.concat_tokens(&[&a, &b]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let err = tape.matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn non_stochastic_target_rejected() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::zeros(&[1, 3]);
        let target = Tensor::new(&[1, 3], vec![0.5, 0.4, 0.0]).unwrap();
        assert!(matches!(tape.cross_entropy_soft(&logits, &target), Err(Error::Validation(_))));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::<f64>::no_grad();
        let w = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.matmul(&w, &w).unwrap();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }
}
