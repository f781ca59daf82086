//! Raw numeric kernels behind the recorded ops. Everything here works on flat
//! row-major slices; shape checking happens in the graph layer.

/// Upper bound on im2col buffer size (in values) before batch items are chunked.
const COL_BUDGET: usize = 1 << 22;

/// `c = alpha * a * b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_item(&self) -> usize {
        self.channels * self.h * self.w
    }

    /// Batch items per im2col chunk.
    fn chunk(&self, n: usize) -> usize {
        (COL_BUDGET / (self.rows() * self.out_plane()).max(1)).clamp(1, n.max(1))
    }

    /// Source index along one axis, or `None` when it falls into padding.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Unfolds `nb` items of `x` into `cols[rows][nb * ho * wo]`.
fn im2col(x: &[f64], nb: usize, g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    let ncols = nb * plane;
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for s in 0..nb {
                    let src = &x[s * g.in_item() + c * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let seg = &mut dst[s * plane + oy * g.wo..][..g.wo];
                        match g.src(oy, ki, g.h) {
                            None => seg.fill(0.0),
                            Some(iy) => {
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    *v = match g.src(ox, kj, g.w) {
                                        Some(ix) => src[iy * g.w + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
fn col2im(cols: &[f64], nb: usize, g: &ConvGeom, x: &mut [f64]) {
    let plane = g.out_plane();
    let ncols = nb * plane;
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for s in 0..nb {
                    let dst = &mut x[s * g.in_item() + c * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ki, g.h) else {
                            continue;
                        };
                        let seg = &src[s * plane + oy * g.wo..][..g.wo];
                        for (ox, v) in seg.iter().enumerate() {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                dst[iy * g.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies `[nb][ch][plane]` into channel-major `[ch][nb * plane]`.
fn to_channel_major(src: &[f64], nb: usize, ch: usize, plane: usize, dst: &mut [f64]) {
    for s in 0..nb {
        for c in 0..ch {
            dst[c * nb * plane + s * plane..][..plane]
                .copy_from_slice(&src[(s * ch + c) * plane..][..plane]);
        }
    }
}

fn from_channel_major(src: &[f64], nb: usize, ch: usize, plane: usize, dst: &mut [f64]) {
    for s in 0..nb {
        for c in 0..ch {
            dst[(s * ch + c) * plane..][..plane]
                .copy_from_slice(&src[c * nb * plane + s * plane..][..plane]);
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let f = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % f];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(dout: &[f64], f: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; f];
    for (i, chunk) in dout.chunks(plane).enumerate() {
        db[i % f] += chunk.iter().sum::<f64>();
    }
    db
}

/// Cross-correlation of `x[n][g.channels][h][w]` with `weight[f][channels][k][k]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    f: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.out_plane();
    let rows = g.rows();
    let mut out = vec![0.0; n * f * plane];
    let chunk = g.chunk(n);
    let mut cols = vec![0.0; rows * chunk * plane];
    let mut tmp = vec![0.0; f * chunk * plane];
    let mut start = 0;
    while start < n {
        let nb = chunk.min(n - start);
        let ncols = nb * plane;
        im2col(&x[start * g.in_item()..], nb, g, &mut cols);
        gemm(
            f,
            rows,
            ncols,
            1.0,
            weight,
            (rows, 1),
            &cols,
            (ncols, 1),
            0.0,
            &mut tmp,
            (ncols, 1),
        );
        from_channel_major(&tmp, nb, f, plane, &mut out[start * f * plane..]);
        start += nb;
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, plane);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    f: usize,
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.out_plane();
    let rows = g.rows();
    let chunk = g.chunk(n);
    let mut dx = need.0.then(|| vec![0.0; n * g.in_item()]);
    let mut dw = need.1.then(|| vec![0.0; f * rows]);
    let mut cols = vec![0.0; rows * chunk * plane];
    let mut dtmp = vec![0.0; f * chunk * plane];
    let mut start = 0;
    while start < n && (need.0 || need.1) {
        let nb = chunk.min(n - start);
        let ncols = nb * plane;
        to_channel_major(&dout[start * f * plane..], nb, f, plane, &mut dtmp);
        if let Some(dw) = dw.as_mut() {
            im2col(&x[start * g.in_item()..], nb, g, &mut cols);
            gemm(
                f,
                ncols,
                rows,
                1.0,
                &dtmp,
                (ncols, 1),
                &cols,
                (1, ncols),
                1.0,
                dw,
                (rows, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                rows,
                f,
                ncols,
                1.0,
                weight,
                (1, rows),
                &dtmp,
                (ncols, 1),
                0.0,
                &mut cols,
                (ncols, 1),
            );
            col2im(&cols, nb, g, &mut dx[start * g.in_item()..]);
        }
        start += nb;
    }
    ConvGrads {
        dx,
        dw,
        db: need.2.then(|| bias_grad(dout, f, plane)),
    }
}

/// Transposed convolution. `g` describes the forward convolution that maps the
/// (larger) output back to the input: `g.channels` is the output channel count,
/// `g.h x g.w` the output extent, and `g.ho x g.wo` the input extent.
/// `weight` is laid out `[c_in][g.channels][k][k]`.
pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    n: usize,
    c_in: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.out_plane();
    let rows = g.rows();
    let mut out = vec![0.0; n * g.in_item()];
    let chunk = g.chunk(n);
    let mut xtmp = vec![0.0; c_in * chunk * plane];
    let mut cols = vec![0.0; rows * chunk * plane];
    let mut start = 0;
    while start < n {
        let nb = chunk.min(n - start);
        let ncols = nb * plane;
        to_channel_major(&x[start * c_in * plane..], nb, c_in, plane, &mut xtmp);
        gemm(
            rows,
            c_in,
            ncols,
            1.0,
            weight,
            (1, rows),
            &xtmp,
            (ncols, 1),
            0.0,
            &mut cols,
            (ncols, 1),
        );
        col2im(&cols, nb, g, &mut out[start * g.in_item()..]);
        start += nb;
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, g.h * g.w);
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    n: usize,
    c_in: usize,
    g: &ConvGeom,
    weight: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.out_plane();
    let rows = g.rows();
    let chunk = g.chunk(n);
    let mut dx = need.0.then(|| vec![0.0; n * c_in * plane]);
    let mut dw = need.1.then(|| vec![0.0; c_in * rows]);
    let mut cols = vec![0.0; rows * chunk * plane];
    let mut tmp = vec![0.0; c_in * chunk * plane];
    let mut start = 0;
    while start < n && (need.0 || need.1) {
        let nb = chunk.min(n - start);
        let ncols = nb * plane;
        im2col(&dout[start * g.in_item()..], nb, g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            gemm(
                c_in,
                rows,
                ncols,
                1.0,
                weight,
                (rows, 1),
                &cols,
                (ncols, 1),
                0.0,
                &mut tmp,
                (ncols, 1),
            );
            from_channel_major(&tmp, nb, c_in, plane, &mut dx[start * c_in * plane..]);
        }
        if let Some(dw) = dw.as_mut() {
            to_channel_major(&x[start * c_in * plane..], nb, c_in, plane, &mut tmp);
            gemm(
                c_in,
                ncols,
                rows,
                1.0,
                &tmp,
                (ncols, 1),
                &cols,
                (1, ncols),
                1.0,
                dw,
                (rows, 1),
            );
        }
        start += nb;
    }
    ConvGrads {
        dx,
        dw,
        db: need.2.then(|| bias_grad(dout, g.channels, g.h * g.w)),
    }
}

/// Normalized coordinate of pixel `i` on an axis of `extent` pixels; the corner
/// pixel centers map to -1 and 1.
#[inline]
pub(crate) fn normalized_coord(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        (2.0 * i as f64 - (extent - 1) as f64) / (extent - 1) as f64
    }
}

/// Pixel-space position of a normalized coordinate. Positions within 1e-9 of
/// an integer snap to it, so grids that land on pixel centers sample exactly.
#[inline]
pub(crate) fn pixel_coord(v: f64, extent: usize) -> f64 {
    let p = (v + 1.0) * 0.5 * (extent.saturating_sub(1)) as f64;
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        r
    } else {
        p
    }
}

/// One bilinear tap: the four neighbour indices (or `None` outside the image)
/// and their weights, plus the x/y fractional parts.
#[derive(Clone, Copy)]
pub(crate) struct Tap {
    pub idx: [Option<usize>; 4],
    pub wts: [f64; 4],
    pub fx: f64,
    pub fy: f64,
}

#[inline]
pub(crate) fn bilinear_tap(gx: f64, gy: f64, h: usize, w: usize) -> Tap {
    let px = pixel_coord(gx, w);
    let py = pixel_coord(gy, h);
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let at = |yy: f64, xx: f64| -> Option<usize> {
        (xx >= 0.0 && yy >= 0.0 && (xx as usize) < w && (yy as usize) < h)
            .then(|| yy as usize * w + xx as usize)
    };
    Tap {
        idx: [
            at(y0, x0),
            at(y0, x0 + 1.0),
            at(y0 + 1.0, x0),
            at(y0 + 1.0, x0 + 1.0),
        ],
        wts: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
    }
}
