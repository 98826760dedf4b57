use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * a·b + beta * c` for row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: callers pass buffers sized for the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn expect_rank(x: &Tensor, rank: usize, op: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(Error::dim(format!("{op}: expected rank {rank}, got {:?}", x.shape())));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], |g| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (av, bv) = (a.to_vec(), b.to_vec());
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], move |g| {
        let ga = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
        let gb = g.iter().zip(&av).map(|(g, a)| g * a).collect();
        vec![Some(ga), Some(gb)]
    }))
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * c).collect();
    Tensor::from_op(x.shape().to_vec(), data, &[x], move |g| {
        vec![Some(g.iter().map(|v| v * c).collect())]
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let xv = x.to_vec();
    Tensor::from_op(x.shape().to_vec(), data, &[x], move |g| {
        let gx = g
            .iter()
            .zip(&xv)
            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
            .collect();
        vec![Some(gx)]
    })
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let saved = out.clone();
    Tensor::from_op(x.shape().to_vec(), out, &[x], move |g| {
        let gx = g.iter().zip(&saved).map(|(g, s)| g * s * (1.0 - s)).collect();
        vec![Some(gx)]
    })
}

/// Sum of all elements, as a one-element tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let s = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(vec![1], vec![s], &[x], move |g| vec![Some(vec![g[0]; n])])
}

/// Sum of a list of same-shape tensors.
pub fn add_all(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::EmptySet("add_all of nothing".into()))?;
    for x in &xs[1..] {
        same_shape(first, x, "add_all")?;
    }
    let mut data = first.to_vec();
    for x in &xs[1..] {
        data.iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
    }
    let k = xs.len();
    Ok(Tensor::from_op(first.shape().to_vec(), data, xs, move |g| {
        (0..k).map(|_| Some(g.to_vec())).collect()
    }))
}

/// Same values under a new shape with the same element count.
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(Error::dim(format!("reshape {:?} -> {shape:?}", x.shape())));
    }
    Ok(Tensor::from_op(shape.to_vec(), x.to_vec(), &[x], |g| vec![Some(g.to_vec())]))
}

/// Transpose of a rank-2 tensor.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "transpose")?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Ok(Tensor::from_op(vec![c, r], out, &[x], move |g| {
        let mut gx = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                gx[i * c + j] = g[j * r + i];
            }
        }
        vec![Some(gx)]
    }))
}

/// Concatenation along `axis`; all other dims must agree.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::EmptySet("concat of nothing".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {axis} on rank {rank}")));
    }
    for x in xs {
        let ok = x.shape().len() == rank
            && x.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::dim(format!(
                "concat: {:?} incompatible with {:?} on axis {axis}",
                x.shape(),
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (x, &w) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    Ok(Tensor::from_op(shape, out, xs, move |g| {
        let mut grads: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (gx, &w) in grads.iter_mut().zip(&widths) {
                gx.extend_from_slice(&g[pos..pos + w]);
                pos += w;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

/// Rows `idx` of a rank-2 tensor, in order (repeats allowed).
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    expect_rank(x, 2, "gather_rows")?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
        return Err(Error::dim(format!("gather_rows: row {bad} out of {r}")));
    }
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    let idx = idx.to_vec();
    Ok(Tensor::from_op(vec![idx.len(), c], out, &[x], move |g| {
        let mut gx = vec![0.0; r * c];
        for (k, &i) in idx.iter().enumerate() {
            gx[i * c..(i + 1) * c]
                .iter_mut()
                .zip(&g[k * c..(k + 1) * c])
                .for_each(|(a, b)| *a += b);
        }
        vec![Some(gx)]
    }))
}

/// `x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(x, 2, "linear")?;
    expect_rank(weight, 2, "linear weight")?;
    let (n, fan_in) = (x.shape()[0], x.shape()[1]);
    let (fan_out, w_in) = (weight.shape()[0], weight.shape()[1]);
    if fan_in != w_in {
        return Err(Error::dim(format!(
            "linear: input has {fan_in} features, weight expects {w_in}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [fan_out] {
            return Err(Error::dim(format!("linear: bias {:?} for {fan_out} outputs", b.shape())));
        }
    }
    let mut out = vec![0.0; n * fan_out];
    gemm(
        n,
        fan_in,
        fan_out,
        x.data(),
        fan_in as isize,
        1,
        weight.data(),
        1,
        fan_in as isize,
        &mut out,
        0.0,
    );
    if let Some(b) = bias {
        for row in out.chunks_mut(fan_out) {
            row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
        }
    }
    let (xv, wv) = (x.to_vec(), weight.to_vec());
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(vec![n, fan_out], out, &parents, move |g| {
        let mut gx = vec![0.0; n * fan_in];
        gemm(n, fan_out, fan_in, g, fan_out as isize, 1, &wv, fan_in as isize, 1, &mut gx, 0.0);
        let mut gw = vec![0.0; fan_out * fan_in];
        gemm(fan_out, n, fan_in, g, 1, fan_out as isize, &xv, fan_in as isize, 1, &mut gw, 0.0);
        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            let mut gb = vec![0.0; fan_out];
            for row in g.chunks(fan_out) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            grads.push(Some(gb));
        }
        grads
    }))
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// Cross-correlation of `x: [C_in, H, W]` with `kernel: [C_out, C_in, k, k]`.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    expect_rank(x, 3, "conv2d")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k_in, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if k_in != c_in || kh != kw {
        return Err(Error::dim(format!(
            "conv2d: kernel {:?} vs input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    let k = kh;
    let (Some(ho), Some(wo)) = (conv_out(h, k, stride, padding), conv_out(w, k, stride, padding)) else {
        return Err(Error::dim(format!(
            "conv2d: kernel {k} (stride {stride}) larger than padded input {h}x{w}+{padding}"
        )));
    };
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::dim(format!("conv2d: bias {:?} for {c_out} outputs", b.shape())));
        }
    }

    let geo = ConvGeometry { c_in, h, w, k, stride, padding, ho, wo };
    let cols = geo.im2col(x.data());
    let rows = c_in * k * k;
    let hw = ho * wo;
    let mut out = vec![0.0; c_out * hw];
    gemm(c_out, rows, hw, kernel.data(), rows as isize, 1, &cols, hw as isize, 1, &mut out, 0.0);
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(hw).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }

    let kv = kernel.to_vec();
    let mut parents = vec![x, kernel];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(vec![c_out, ho, wo], out, &parents, move |g| {
        let mut gk = vec![0.0; c_out * rows];
        gemm(c_out, hw, rows, g, hw as isize, 1, &cols, 1, hw as isize, &mut gk, 0.0);
        let mut gcols = vec![0.0; rows * hw];
        gemm(rows, c_out, hw, &kv, 1, rows as isize, g, hw as isize, 1, &mut gcols, 0.0);
        let gx = geo.col2im(&gcols);
        let mut grads = vec![Some(gx), Some(gk)];
        if has_bias {
            grads.push(Some(g.chunks(hw).map(|p| p.iter().sum()).collect()));
        }
        grads
    }))
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        (iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w)
            .then(|| iy as usize * self.w + ix as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut cols = vec![0.0; self.c_in * self.k * self.k * hw];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.src(oy, ox, ky, kx) {
                                dst[oy * self.wo + ox] = plane[s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.src(oy, ox, ky, kx) {
                                plane[s] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Transposed convolution whose kernel size equals its stride, so output
/// taps never overlap. `x: [C_in, H, W]`, `kernel: [C_in, C_out, s, s]`,
/// output `[C_out, H·s, W·s]`. With `s = 1` this is a 1×1 convolution.
pub fn upconv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(x, 3, "upconv2d")?;
    expect_rank(kernel, 4, "upconv2d kernel")?;
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k_in, c_out, s, s2) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if k_in != c_in || s != s2 || s == 0 {
        return Err(Error::dim(format!(
            "upconv2d: kernel {:?} vs input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::dim(format!("upconv2d: bias {:?}", b.shape())));
        }
    }
    let hw = h * w;
    let taps = c_out * s * s;
    // y[(co,a,b), (i,j)] = Σ_ci W[ci,(co,a,b)] · x[ci,(i,j)]
    let mut y = vec![0.0; taps * hw];
    gemm(taps, c_in, hw, kernel.data(), 1, taps as isize, x.data(), hw as isize, 1, &mut y, 0.0);
    let (ho, wo) = (h * s, w * s);
    let mut out = vec![0.0; c_out * ho * wo];
    let bias_v = bias.map(|b| b.to_vec());
    for co in 0..c_out {
        let bv = bias_v.as_ref().map_or(0.0, |b| b[co]);
        for a in 0..s {
            for b in 0..s {
                let src = &y[((co * s + a) * s + b) * hw..][..hw];
                for i in 0..h {
                    for j in 0..w {
                        out[(co * ho + i * s + a) * wo + j * s + b] = src[i * w + j] + bv;
                    }
                }
            }
        }
    }

    let (xv, kv) = (x.to_vec(), kernel.to_vec());
    let mut parents = vec![x, kernel];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(vec![c_out, ho, wo], out, &parents, move |g| {
        let mut gy = vec![0.0; taps * hw];
        for co in 0..c_out {
            for a in 0..s {
                for b in 0..s {
                    let dst = &mut gy[((co * s + a) * s + b) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = g[(co * ho + i * s + a) * wo + j * s + b];
                        }
                    }
                }
            }
        }
        let mut gx = vec![0.0; c_in * hw];
        gemm(c_in, taps, hw, &kv, taps as isize, 1, &gy, hw as isize, 1, &mut gx, 0.0);
        let mut gk = vec![0.0; c_in * taps];
        gemm(c_in, hw, taps, &xv, hw as isize, 1, &gy, 1, hw as isize, &mut gk, 0.0);
        let mut grads = vec![Some(gx), Some(gk)];
        if has_bias {
            grads.push(Some(g.chunks(ho * wo).map(|p| p.iter().sum()).collect()));
        }
        grads
    }))
}

/// Per-channel max over the rows of `x: [P, C]` selected by `mask`.
/// Gradient goes to the first maximising row of each channel.
pub fn max_over_set(x: &Tensor, mask: &[bool]) -> Result<Tensor> {
    expect_rank(x, 2, "max_over_set")?;
    if mask.len() != x.shape()[0] {
        return Err(Error::dim(format!(
            "max_over_set: mask of {} for {} rows",
            mask.len(),
            x.shape()[0]
        )));
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::EmptySet("max_over_set with no masked rows".into()));
    }
    let out = segment_max(x, &[rows])?;
    reshape(&out, &[x.shape()[1]])
}

/// Per-channel max of `x: [M, C]` over each group of row indices, giving
/// `[groups, C]`. Ties go to the earliest row in the group's list.
pub fn segment_max(x: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor> {
    expect_rank(x, 2, "segment_max")?;
    let (m, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; groups.len() * c];
    let mut argmax = vec![0usize; groups.len() * c];
    for (gi, rows) in groups.iter().enumerate() {
        let Some(&first) = rows.first() else {
            return Err(Error::EmptySet(format!("segment_max: group {gi} is empty")));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::dim(format!("segment_max: row {bad} out of {m}")));
        }
        for ch in 0..c {
            let mut best = xd[first * c + ch];
            let mut arg = first;
            for &r in &rows[1..] {
                let v = xd[r * c + ch];
                if v > best {
                    best = v;
                    arg = r;
                }
            }
            out[gi * c + ch] = best;
            argmax[gi * c + ch] = arg;
        }
    }
    Ok(Tensor::from_op(vec![groups.len(), c], out, &[x], move |g| {
        let mut gx = vec![0.0; m * c];
        for (k, (&arg, gv)) in argmax.iter().zip(g).enumerate() {
            gx[arg * c + k % c] += gv;
        }
        vec![Some(gx)]
    }))
}

/// Places row `p` of `x: [P, C]` at flat cell `cells[p]` of a `[C, H, W]`
/// grid; untouched cells are zero.
pub fn scatter_rows_to_grid(x: &Tensor, cells: &[usize], h: usize, w: usize) -> Result<Tensor> {
    expect_rank(x, 2, "scatter_rows_to_grid")?;
    let (p, c) = (x.shape()[0], x.shape()[1]);
    if cells.len() != p {
        return Err(Error::dim(format!("scatter: {} cells for {p} rows", cells.len())));
    }
    let hw = h * w;
    let mut seen = vec![false; hw];
    for &cell in cells {
        if cell >= hw {
            return Err(Error::contract(format!("scatter: cell {cell} outside {h}x{w} grid")));
        }
        if std::mem::replace(&mut seen[cell], true) {
            return Err(Error::contract(format!("scatter: duplicate cell {cell}")));
        }
    }
    let xd = x.data();
    let mut out = vec![0.0; c * hw];
    for (row, &cell) in cells.iter().enumerate() {
        for ch in 0..c {
            out[ch * hw + cell] = xd[row * c + ch];
        }
    }
    let cells = cells.to_vec();
    Ok(Tensor::from_op(vec![c, h, w], out, &[x], move |g| {
        let mut gx = vec![0.0; p * c];
        for (row, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                gx[row * c + ch] = g[ch * hw + cell];
            }
        }
        vec![Some(gx)]
    }))
}
