//! Forward and backward kernels over flat row-major slices.
//!
//! Every kernel is a pure function of its arguments. Backward kernels
//! accumulate into the provided gradient buffers rather than overwriting.

/// NCHW geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output positions `lo..hi` whose tap at kernel offset `k` lands inside an
    /// input axis of length `len`.
    #[inline]
    fn tap_range(&self, out_len: usize, k: usize, len: usize) -> (usize, usize) {
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(self.stride) };
        let hi = if len + self.pad > k {
            ((len - 1 + self.pad - k) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(out_offset, in_offset)` for every output position whose tap
    /// `(ky, kx)` reads a real (non-padding) input pixel of one plane.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let (ylo, yhi) = self.tap_range(self.out_h, ky, self.h);
        let (xlo, xhi) = self.tap_range(self.out_w, kx, self.w);
        for oy in ylo..yhi {
            let iy = oy * self.stride + ky - self.pad;
            let (orow, irow) = (oy * self.out_w, iy * self.w);
            for ox in xlo..xhi {
                f(orow + ox, irow + ox * self.stride + kx - self.pad);
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (plane, out_plane) = (g.h * g.w, g.out_h * g.out_w);
    let mut out = vec![0.0; g.n * g.c_out * out_plane];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + o) * out_plane..][..out_plane];
            dst.fill(b[o]);
            for i in 0..g.c_in {
                let src = &x[(n * g.c_in + i) * plane..][..plane];
                let w_base = (o * g.c_in + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[w_base + ky * g.kw + kx];
                        g.for_each_tap(ky, kx, |oi, ii| dst[oi] += wv * src[ii]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (plane, out_plane) = (g.h * g.w, g.out_h * g.out_w);
    if let Some(db) = db {
        for n in 0..g.n {
            for o in 0..g.c_out {
                let base = (n * g.c_out + o) * out_plane;
                db[o] += gout[base..base + out_plane].iter().sum::<f64>();
            }
        }
    }
    for n in 0..g.n {
        for o in 0..g.c_out {
            let go = &gout[(n * g.c_out + o) * out_plane..][..out_plane];
            for i in 0..g.c_in {
                let x_base = (n * g.c_in + i) * plane;
                let w_base = (o * g.c_in + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wi = w_base + ky * g.kw + kx;
                        if let Some(dx) = dx.as_deref_mut() {
                            let (wv, dst) = (w[wi], &mut dx[x_base..x_base + plane]);
                            g.for_each_tap(ky, kx, |oi, ii| dst[ii] += wv * go[oi]);
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let src = &x[x_base..x_base + plane];
                            let mut acc = 0.0;
                            g.for_each_tap(ky, kx, |oi, ii| acc += go[oi] * src[ii]);
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (plane, out_plane) = (g.h * g.w, g.out_h * g.out_w);
    let mut out = vec![0.0; g.n * g.c_in * out_plane];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let src = &x[(n * g.c_in + c) * plane..][..plane];
            let dst = &mut out[(n * g.c_in + c) * out_plane..][..out_plane];
            dst.fill(b[c]);
            let w_base = c * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[w_base + ky * g.kw + kx];
                    g.for_each_tap(ky, kx, |oi, ii| dst[oi] += wv * src[ii]);
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (plane, out_plane) = (g.h * g.w, g.out_h * g.out_w);
    if let Some(db) = db {
        for n in 0..g.n {
            for c in 0..g.c_in {
                let base = (n * g.c_in + c) * out_plane;
                db[c] += gout[base..base + out_plane].iter().sum::<f64>();
            }
        }
    }
    for n in 0..g.n {
        for c in 0..g.c_in {
            let x_base = (n * g.c_in + c) * plane;
            let go = &gout[(n * g.c_in + c) * out_plane..][..out_plane];
            let w_base = c * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wi = w_base + ky * g.kw + kx;
                    if let Some(dx) = dx.as_deref_mut() {
                        let (wv, dst) = (w[wi], &mut dx[x_base..x_base + plane]);
                        g.for_each_tap(ky, kx, |oi, ii| dst[ii] += wv * go[oi]);
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let src = &x[x_base..x_base + plane];
                        let mut acc = 0.0;
                        g.for_each_tap(ky, kx, |oi, ii| acc += go[oi] * src[ii]);
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rows×d_in` times transposed `d_out×d_in` weight, plus bias.
pub(crate) fn linear_forward(x: &[f64], rows: usize, d_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            out[r * d_out + o] = dot(xr, &w[o * d_in..(o + 1) * d_in]) + b[o];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    rows: usize,
    d_in: usize,
    w: &[f64],
    gout: &[f64],
    d_out: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let go = gout[r * d_out + o];
            if let Some(db) = db.as_deref_mut() {
                db[o] += go;
            }
            if go == 0.0 {
                continue;
            }
            let wo = &w[o * d_in..(o + 1) * d_in];
            if let Some(dx) = dx.as_deref_mut() {
                for (d, wv) in dx[r * d_in..(r + 1) * d_in].iter_mut().zip(wo) {
                    *d += go * wv;
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                for (d, xv) in dw[o * d_in..(o + 1) * d_in].iter_mut().zip(xr) {
                    *d += go * xv;
                }
            }
        }
    }
}

/// Normalized rows and per-row inverse standard deviations, kept for backward.
pub(crate) struct LayerNormSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormSaved) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, LayerNormSaved { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    saved: &LayerNormSaved,
    d: usize,
    gamma: &[f64],
    gout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) {
    let rows = saved.inv_std.len();
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let go = &gout[r * d..(r + 1) * d];
        let xh = &saved.xhat[r * d..(r + 1) * d];
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..d {
                dg[j] += go[j] * xh[j];
            }
        }
        if let Some(dbt) = dbeta.as_deref_mut() {
            for j in 0..d {
                dbt[j] += go[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            for j in 0..d {
                dxhat[j] = go[j] * gamma[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dot(&dxhat, xh) / d as f64;
            let is = saved.inv_std[r];
            for j in 0..d {
                dx[r * d + j] += is * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// a (m×k) · b (k×n)
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// out (k×n) += aᵀ · b, with a m×k and b m×n.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out (m×n) += a · bᵀ, with a m×k and b n×k.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Per-batch projections and attention weights kept for backward.
pub(crate) struct AttentionSaved {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Row-stochastic attention weights, N×T×T.
    pub probs: Vec<f64>,
    /// probs · V, N×T×D.
    pub ctx: Vec<f64>,
}

pub(crate) struct AttentionWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

pub(crate) fn attention_forward(
    x: &[f64],
    n: usize,
    t: usize,
    d: usize,
    w: &AttentionWeights<'_>,
) -> (Vec<f64>, AttentionSaved) {
    let scale = 1.0 / (d as f64).sqrt();
    let td = t * d;
    let mut saved = AttentionSaved {
        q: Vec::with_capacity(n * td),
        k: Vec::with_capacity(n * td),
        v: Vec::with_capacity(n * td),
        probs: Vec::with_capacity(n * t * t),
        ctx: Vec::with_capacity(n * td),
    };
    let mut out = Vec::with_capacity(n * td);
    for b in 0..n {
        let xb = &x[b * td..(b + 1) * td];
        let q = matmul(xb, w.wq, t, d, d);
        let k = matmul(xb, w.wk, t, d, d);
        let v = matmul(xb, w.wv, t, d, d);
        let mut probs = vec![0.0; t * t];
        matmul_a_bt_acc(&q, &k, t, d, t, &mut probs);
        for row in probs.chunks_mut(t) {
            let max = row.iter().map(|s| s * scale).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let ctx = matmul(&probs, &v, t, t, d);
        out.extend(matmul(&ctx, w.wo, t, d, d));
        saved.q.extend(q);
        saved.k.extend(k);
        saved.v.extend(v);
        saved.probs.extend(probs);
        saved.ctx.extend(ctx);
    }
    (out, saved)
}

/// Gradients for the attention op; any `None` slot is skipped.
pub(crate) struct AttentionGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dwq: Option<&'a mut [f64]>,
    pub dwk: Option<&'a mut [f64]>,
    pub dwv: Option<&'a mut [f64]>,
    pub dwo: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    x: &[f64],
    n: usize,
    t: usize,
    d: usize,
    w: &AttentionWeights<'_>,
    saved: &AttentionSaved,
    gout: &[f64],
    grads: &mut AttentionGrads<'_>,
) {
    let scale = 1.0 / (d as f64).sqrt();
    let td = t * d;
    for b in 0..n {
        let xb = &x[b * td..(b + 1) * td];
        let go = &gout[b * td..(b + 1) * td];
        let q = &saved.q[b * td..(b + 1) * td];
        let k = &saved.k[b * td..(b + 1) * td];
        let v = &saved.v[b * td..(b + 1) * td];
        let p = &saved.probs[b * t * t..(b + 1) * t * t];
        let ctx = &saved.ctx[b * td..(b + 1) * td];

        if let Some(dwo) = grads.dwo.as_deref_mut() {
            matmul_at_b_acc(ctx, go, t, d, d, dwo);
        }
        // d ctx = go · woᵀ
        let mut dctx = vec![0.0; td];
        matmul_a_bt_acc(go, w.wo, t, d, d, &mut dctx);
        // d probs = d ctx · vᵀ
        let mut dp = vec![0.0; t * t];
        matmul_a_bt_acc(&dctx, v, t, d, t, &mut dp);
        // d v = probsᵀ · d ctx
        let mut dv = vec![0.0; td];
        matmul_at_b_acc(p, &dctx, t, t, d, &mut dv);
        // softmax backward, folded with the 1/sqrt(d) score scale
        let mut ds = vec![0.0; t * t];
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dpr = &dp[i * t..(i + 1) * t];
            let inner = dot(pr, dpr);
            for j in 0..t {
                ds[i * t + j] = pr[j] * (dpr[j] - inner) * scale;
            }
        }
        let dq = matmul(&ds, k, t, t, d);
        let mut dk = vec![0.0; td];
        matmul_at_b_acc(&ds, q, t, t, d, &mut dk);

        if let Some(dwq) = grads.dwq.as_deref_mut() {
            matmul_at_b_acc(xb, &dq, t, d, d, dwq);
        }
        if let Some(dwk) = grads.dwk.as_deref_mut() {
            matmul_at_b_acc(xb, &dk, t, d, d, dwk);
        }
        if let Some(dwv) = grads.dwv.as_deref_mut() {
            matmul_at_b_acc(xb, &dv, t, d, d, dwv);
        }
        if let Some(dx) = grads.dx.as_deref_mut() {
            let dxb = &mut dx[b * td..(b + 1) * td];
            matmul_a_bt_acc(&dq, w.wq, t, d, d, dxb);
            matmul_a_bt_acc(&dk, w.wk, t, d, d, dxb);
            matmul_a_bt_acc(&dv, w.wv, t, d, d, dxb);
        }
    }
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the flat index in the input it reads from.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Cosine per row of two N×D matrices, with row norms kept for backward.
pub(crate) struct CosineSaved {
    pub dots: Vec<f64>,
    pub aa: Vec<f64>,
    pub bb: Vec<f64>,
}

pub(crate) fn cosine_rows_forward(a: &[f64], b: &[f64], d: usize) -> (Vec<f64>, CosineSaved) {
    let rows = a.len() / d;
    let mut out = Vec::with_capacity(rows);
    let mut saved = CosineSaved {
        dots: Vec::with_capacity(rows),
        aa: Vec::with_capacity(rows),
        bb: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let ar = &a[r * d..(r + 1) * d];
        let br = &b[r * d..(r + 1) * d];
        let (ab, aa, bb) = (dot(ar, br), dot(ar, ar), dot(br, br));
        // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): identical rows give exactly 1.
        out.push(ab / (aa * bb).sqrt());
        saved.dots.push(ab);
        saved.aa.push(aa);
        saved.bb.push(bb);
    }
    (out, saved)
}

/// d cos / d a = (b − (a·b / a·a) a) / sqrt(a·a · b·b), which is exactly zero for a == b.
pub(crate) fn cosine_rows_backward(
    a: &[f64],
    b: &[f64],
    d: usize,
    saved: &CosineSaved,
    gout: &[f64],
    mut da: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    for r in 0..gout.len() {
        let go = gout[r];
        if go == 0.0 {
            continue;
        }
        let ar = &a[r * d..(r + 1) * d];
        let br = &b[r * d..(r + 1) * d];
        let denom = (saved.aa[r] * saved.bb[r]).sqrt();
        if let Some(da) = da.as_deref_mut() {
            let ratio = saved.dots[r] / saved.aa[r];
            for j in 0..d {
                da[r * d + j] += go * (br[j] - ratio * ar[j]) / denom;
            }
        }
        if let Some(db) = db.as_deref_mut() {
            let ratio = saved.dots[r] / saved.bb[r];
            for j in 0..d {
                db[r * d + j] += go * (ar[j] - ratio * br[j]) / denom;
            }
        }
    }
}
