//! Differentiable operations. Each op computes its forward value eagerly and
//! registers a closure that scatters upstream gradients into its parents.

use super::{Scalar, Tensor};
use crate::error::{bail_contract, bail_dim, Result, TahError};

fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        c,
    );
}

/// C = A * B^T where B is stored row-major [n, k].
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        T::zero(),
        c,
    );
}

/// C = A^T * B where A is stored row-major [k, m].
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        T::zero(),
        c,
    );
}

impl<T: Scalar> Tensor<T> {
    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            bail_dim!("matmul inner extents disagree: [{m},{k}] x [{k2},{n}]");
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data(), &rhs.data(), &mut out);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    // dA = G * B^T
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, &b.data(), &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = A^T * G
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, &a.data(), g, &mut db);
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Transposed product `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (n, k2) = rhs.dims2()?;
        if k != k2 {
            bail_dim!("matmul_nt inner extents disagree: [{m},{k}] x [{n},{k2}]^T");
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, &self.data(), &rhs.data(), &mut out);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    // dA = G * B
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(m, n, k, g, &b.data(), &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = G^T * A
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(n, m, k, g, &a.data(), &mut db);
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_same_shape(rhs, "add")?;
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(g);
                }
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_same_shape(rhs, "sub")?;
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    b.accumulate_grad(&neg);
                }
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_same_shape(rhs, "mul")?;
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<T> = g.iter().zip(b.data().iter()).map(|(&g, &y)| g * y).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<T> = g.iter().zip(a.data().iter()).map(|(&g, &x)| g * x).collect();
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&self, scale: T, shift: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| scale * x + shift).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<T> = g.iter().map(|&x| scale * x).collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Broadcasts a length-n bias row over an `[m,n]` matrix.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if bias.shape() != [n] {
            bail_dim!("add_row: bias shape {:?} vs row width {n}", bias.shape());
        }
        let bd = bias.to_vec();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); n];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        let sig: Vec<T> = self
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(sig.iter())
            .map(|(&x, &s)| x * s)
            .collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(a.data().iter().zip(sig.iter()))
                        .map(|(&g, (&x, &s))| g * s * (T::one() + x * (T::one() - s)))
                        .collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let saved = out.clone();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(saved.iter())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Natural log; caller guarantees positive inputs (see `clamp`).
    pub fn ln(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x.ln()).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&g, &x)| g / x)
                        .collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let out = self
            .data()
            .iter()
            .map(|&x| x.max(lo).min(hi))
            .collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&g, &x)| if x >= lo && x <= hi { g } else { T::zero() })
                        .collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if n == 0 {
            bail_dim!("softmax over empty rows");
        }
        let mut out = vec![T::zero(); m * n];
        {
            let data = self.data();
            for r in 0..m {
                let row = &data[r * n..(r + 1) * n];
                let mut mx = row[0];
                for &x in row {
                    if !x.is_finite() && x != T::neg_infinity() {
                        return Err(TahError::Numeric(format!(
                            "softmax input not finite: {x}"
                        )));
                    }
                    if x > mx {
                        mx = x;
                    }
                }
                if mx == T::neg_infinity() {
                    return Err(TahError::Numeric(
                        "softmax row has no finite entry".into(),
                    ));
                }
                let mut sum = T::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - mx).exp();
                    out[r * n + j] = e;
                    sum += e;
                }
                for v in &mut out[r * n..(r + 1) * n] {
                    *v /= sum;
                }
            }
        }
        let saved = out.clone();
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..m {
                        let y = &saved[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += gr[j] * y[j];
                        }
                        for j in 0..n {
                            da[r * n + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if n == 0 {
            bail_dim!("log_softmax over empty rows");
        }
        let mut out = vec![T::zero(); m * n];
        let mut probs = vec![T::zero(); m * n];
        {
            let data = self.data();
            for r in 0..m {
                let row = &data[r * n..(r + 1) * n];
                let mut mx = row[0];
                for &x in row {
                    if !x.is_finite() {
                        return Err(TahError::Numeric(format!(
                            "log_softmax input not finite: {x}"
                        )));
                    }
                    if x > mx {
                        mx = x;
                    }
                }
                let mut sum = T::zero();
                for &x in row {
                    sum += (x - mx).exp();
                }
                let lse = mx + sum.ln();
                for (j, &x) in row.iter().enumerate() {
                    out[r * n + j] = x - lse;
                    probs[r * n + j] = (x - lse).exp();
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let pr = &probs[r * n..(r + 1) * n];
                        let mut gsum = T::zero();
                        for j in 0..n {
                            gsum += gr[j];
                        }
                        for j in 0..n {
                            da[r * n + j] = gr[j] - pr[j] * gsum;
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Pre-norm RMS normalization with a learned gain, row-wise.
    pub fn rms_norm(&self, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if gain.shape() != [n] {
            bail_dim!("rms_norm: gain shape {:?} vs width {n}", gain.shape());
        }
        let mut out = vec![T::zero(); m * n];
        let mut inv_rms = vec![T::zero(); m];
        {
            let data = self.data();
            let gd = gain.data();
            let nn = T::from_f64(n as f64);
            for r in 0..m {
                let row = &data[r * n..(r + 1) * n];
                let mut ssq = T::zero();
                for &x in row {
                    ssq += x * x;
                }
                let inv = T::one() / (ssq / nn + eps).sqrt();
                inv_rms[r] = inv;
                for j in 0..n {
                    out[r * n + j] = row[j] * inv * gd[j];
                }
            }
        }
        let (a, gt) = (self.clone(), gain.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), gain.clone()],
            Box::new(move |g| {
                let data = a.data();
                let gd = gt.data();
                let nn = T::from_f64(n as f64);
                if a.requires_grad() {
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..m {
                        let row = &data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inv = inv_rms[r];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += gr[j] * gd[j] * row[j];
                        }
                        let coef = dot * inv * inv * inv / nn;
                        for j in 0..n {
                            da[r * n + j] = gr[j] * gd[j] * inv - row[j] * coef;
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if gt.requires_grad() {
                    let mut dg = vec![T::zero(); n];
                    for r in 0..m {
                        let row = &data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inv = inv_rms[r];
                        for j in 0..n {
                            dg[j] += gr[j] * row[j] * inv;
                        }
                    }
                    gt.accumulate_grad(&dg);
                }
            }),
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut s = T::zero();
        for &x in self.data().iter() {
            s += x;
        }
        let a = self.clone();
        let numel = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da = vec![g[0]; numel];
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().affine(T::one() / T::from_f64(n as f64), T::zero())
    }

    /// Picks one column per row: `out[i] = self[i, idx[i]]`, shape `[m, 1]`.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if idx.len() != m {
            bail_dim!("select_cols: {} indices for {m} rows", idx.len());
        }
        for &j in idx {
            if j >= n {
                bail_dim!("select_cols: index {j} out of width {n}");
            }
        }
        let data = self.data();
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| data[i * n + j]).collect();
        drop(data);
        let a = self.clone();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![m, 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![T::zero(); m * n];
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * n + j] = g[i];
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Gathers rows by index (duplicates allowed); gradient scatter-adds.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        for &i in idx {
            if i >= m {
                bail_dim!("select_rows: row {i} out of {m}");
            }
        }
        let data = self.data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        drop(data);
        let a = self.clone();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![T::zero(); m * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += g[r * n + j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Contiguous column slice `[m, len]` starting at `start`.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if start + len > n {
            bail_dim!("narrow_cols: {start}+{len} exceeds width {n}");
        }
        let data = self.data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&data[r * n + start..r * n + start + len]);
        }
        drop(data);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![m, len],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..m {
                        da[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }
}

/// Vertical concatenation of 2-D tensors with equal widths.
pub fn concat_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        bail_contract!("concat_rows of zero tensors");
    }
    let (_, n) = parts[0].dims2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    let mut extents = Vec::with_capacity(parts.len());
    for p in parts {
        let (m, n2) = p.dims2()?;
        if n2 != n {
            bail_dim!("concat_rows: width {n2} != {n}");
        }
        rows += m;
        extents.push(m);
        data.extend_from_slice(&p.data());
    }
    let owned: Vec<Tensor<T>> = parts.to_vec();
    Ok(Tensor::from_op(
        vec![rows, n],
        data,
        parts.to_vec(),
        Box::new(move |g| {
            let mut offset = 0;
            for (p, &m) in owned.iter().zip(extents.iter()) {
                if p.requires_grad() {
                    p.accumulate_grad(&g[offset..offset + m * n]);
                }
                offset += m * n;
            }
        }),
    ))
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        bail_contract!("concat_cols of zero tensors");
    }
    let (m, _) = parts[0].dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        let (m2, w) = p.dims2()?;
        if m2 != m {
            bail_dim!("concat_cols: rows {m2} != {m}");
        }
        widths.push(w);
        total += w;
    }
    let mut data = Vec::with_capacity(m * total);
    for r in 0..m {
        for p in parts {
            let (_, w) = p.dims2()?;
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let owned: Vec<Tensor<T>> = parts.to_vec();
    Ok(Tensor::from_op(
        vec![m, total],
        data,
        parts.to_vec(),
        Box::new(move |g| {
            let mut col = 0;
            for (p, &w) in owned.iter().zip(widths.iter()) {
                if p.requires_grad() {
                    let mut dp = vec![T::zero(); m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + col..r * total + col + w]);
                    }
                    p.accumulate_grad(&dp);
                }
                col += w;
            }
        }),
    ))
}

/// Embedding-row lookup: `out[i] = table[ids[i]]`, gradient scatter-adds
/// into the table.
pub fn embed<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let (v, h) = table.dims2()?;
    for &id in ids {
        if id as usize >= v {
            bail_dim!("embed: token id {id} out of vocab {v}");
        }
    }
    let data = table.data();
    let mut out = Vec::with_capacity(ids.len() * h);
    for &id in ids {
        let i = id as usize;
        out.extend_from_slice(&data[i * h..(i + 1) * h]);
    }
    drop(data);
    let t = table.clone();
    let ids = ids.to_vec();
    Ok(Tensor::from_op(
        vec![ids.len(), h],
        out,
        vec![table.clone()],
        Box::new(move |g| {
            if t.requires_grad() {
                let mut dt = vec![T::zero(); v * h];
                for (r, &id) in ids.iter().enumerate() {
                    let i = id as usize;
                    for j in 0..h {
                        dt[i * h + j] += g[r * h + j];
                    }
                }
                t.accumulate_grad(&dt);
            }
        }),
    ))
}

/// Probability-weighted sum of embedding rows with per-row index lists:
/// `out[i] = sum_k probs[i,k] * table[ids[i][k]]`.
pub fn weighted_embed<T: Scalar>(
    probs: &Tensor<T>,
    ids: &[Vec<u32>],
    table: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, k) = probs.dims2()?;
    let (v, h) = table.dims2()?;
    if ids.len() != m {
        bail_dim!("weighted_embed: {} id rows for {m} prob rows", ids.len());
    }
    for row in ids {
        if row.len() != k {
            bail_dim!("weighted_embed: id row length {} != {k}", row.len());
        }
        for &id in row {
            if id as usize >= v {
                bail_dim!("weighted_embed: token id {id} out of vocab {v}");
            }
        }
    }
    let mut out = vec![T::zero(); m * h];
    {
        let pd = probs.data();
        let td = table.data();
        for i in 0..m {
            for (kk, &id) in ids[i].iter().enumerate() {
                let p = pd[i * k + kk];
                let row = &td[id as usize * h..(id as usize + 1) * h];
                for j in 0..h {
                    out[i * h + j] += p * row[j];
                }
            }
        }
    }
    let (pt, tt) = (probs.clone(), table.clone());
    let ids = ids.to_vec();
    Ok(Tensor::from_op(
        vec![m, h],
        out,
        vec![probs.clone(), table.clone()],
        Box::new(move |g| {
            let pd = pt.data();
            let td = tt.data();
            if pt.requires_grad() {
                let mut dp = vec![T::zero(); m * k];
                for i in 0..m {
                    for (kk, &id) in ids[i].iter().enumerate() {
                        let row = &td[id as usize * h..(id as usize + 1) * h];
                        let mut dot = T::zero();
                        for j in 0..h {
                            dot += g[i * h + j] * row[j];
                        }
                        dp[i * k + kk] = dot;
                    }
                }
                pt.accumulate_grad(&dp);
            }
            if tt.requires_grad() {
                let mut dt = vec![T::zero(); v * h];
                for i in 0..m {
                    for (kk, &id) in ids[i].iter().enumerate() {
                        let p = pd[i * k + kk];
                        let base = id as usize * h;
                        for j in 0..h {
                            dt[base + j] += p * g[i * h + j];
                        }
                    }
                }
                tt.accumulate_grad(&dt);
            }
        }),
    ))
}

/// Rotary position encoding applied per head over `[n, heads*head_dim]`.
/// The rotation angle for pair `p` at token position `pos` is
/// `pos * base^(-2p/head_dim)`; the same token position is reused at every
/// iteration depth.
pub fn rope<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    num_heads: usize,
    head_dim: usize,
    base: f64,
) -> Result<Tensor<T>> {
    let (n, w) = x.dims2()?;
    if w != num_heads * head_dim {
        bail_dim!("rope: width {w} != {num_heads}x{head_dim}");
    }
    if positions.len() != n {
        bail_dim!("rope: {} positions for {n} rows", positions.len());
    }
    if !head_dim.is_multiple_of(2) {
        bail_dim!("rope: head_dim {head_dim} must be even");
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| base.powf(-2.0 * p as f64 / head_dim as f64))
        .collect();
    let rotate = |src: &[T], dst: &mut [T], sign: f64| {
        for (r, &pos) in positions.iter().enumerate() {
            for hh in 0..num_heads {
                let off = r * w + hh * head_dim;
                for p in 0..half {
                    let theta = sign * pos as f64 * freqs[p];
                    let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                    let a = src[off + 2 * p];
                    let b = src[off + 2 * p + 1];
                    dst[off + 2 * p] = a * cos - b * sin;
                    dst[off + 2 * p + 1] = a * sin + b * cos;
                }
            }
        }
    };
    let mut out = vec![T::zero(); n * w];
    rotate(&x.data(), &mut out, 1.0);
    let a = x.clone();
    let positions = positions.to_vec();
    Ok(Tensor::from_op(
        vec![n, w],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            if a.requires_grad() {
                // The rotation is orthogonal; its adjoint rotates by -theta.
                let mut da = vec![T::zero(); n * w];
                for (r, &pos) in positions.iter().enumerate() {
                    for hh in 0..num_heads {
                        let off = r * w + hh * head_dim;
                        for p in 0..half {
                            let theta = -(pos as f64) * freqs[p];
                            let (sin, cos) =
                                (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                            let ga = g[off + 2 * p];
                            let gb = g[off + 2 * p + 1];
                            da[off + 2 * p] = ga * cos - gb * sin;
                            da[off + 2 * p + 1] = ga * sin + gb * cos;
                        }
                    }
                }
                a.accumulate_grad(&da);
            }
        }),
    ))
}

impl<T: Scalar> Tensor<T> {
    fn zip_same_shape(&self, rhs: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            bail_dim!(
                "{op}: shape {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            );
        }
        Ok(())
    }
}
