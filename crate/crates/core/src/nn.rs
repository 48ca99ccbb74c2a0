//! CPU building blocks for the segmentation network: NCHW tensors and layers
//! with hand-written backward passes. Layers cache what their backward pass
//! needs during a training-mode forward; evaluation-mode forwards cache
//! nothing.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense NCHW tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// All channels of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.c * self.plane();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.c * self.plane();
        &mut self.data[i * len..(i + 1) * len]
    }
}

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f32>) -> Param {
        let len = value.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        Param {
            name,
            shape,
            value,
            grad: vec![0.0; len],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Non-trainable state saved with the weights (BN running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pixels per im2col tile; bounds scratch memory at large resolutions.
const TILE_PIXELS: usize = 8192;

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Highest element touched by each operand must be in bounds.
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(k == 0 || extent(m, k, rsa, csa) as usize <= a.len());
    assert!(k == 0 || extent(k, n, rsb, csb) as usize <= b.len());
    assert!(extent(m, n, rsc, csc) as usize <= c.len());
    // SAFETY: strides are non-negative and the asserts above keep every
    // accessed element inside the borrowed slices; `c` does not alias.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// 2-D convolution, stride 1, "same" zero padding, odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, kernel: usize, bias: bool, rng: &mut R) -> Conv2d {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight: Vec<f32> = (0..out_ch * fan_in)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_ch, in_ch, kernel, kernel],
                weight,
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch])),
            input: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.value.len() + self.bias.as_ref().map_or(0, |b| b.value.len())
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Unrolls rows `y0..y1` of one image into `cols` ([patch_len, rows*w]).
    fn im2col(&self, img: &[f32], h: usize, w: usize, y0: usize, y1: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let npix = (y1 - y0) * w;
        for ci in 0..self.in_ch {
            let plane = &img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    let dx = kx as isize - pad;
                    // Valid output x range for this horizontal offset.
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in y0..y1 {
                        let out = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        out[..x_lo].fill(0.0);
                        out[x_hi..].fill(0.0);
                        let s0 = (x_lo as isize + dx) as usize;
                        out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates `cols` into the image gradient.
    fn col2im(&self, cols: &[f32], h: usize, w: usize, y0: usize, y1: usize, img: &mut [f32]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let npix = (y1 - y0) * w;
        for ci in 0..self.in_ch {
            let plane = &mut img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * npix..(row + 1) * npix];
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = (x_lo as isize + dx) as usize;
                        let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                        let part = &src[(y - y0) * w + x_lo..(y - y0) * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(part) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    fn tile_rows(&self, w: usize) -> usize {
        (TILE_PIXELS / w).max(1)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.patch_len();
        let mut out = Tensor::zeros(x.n, self.out_ch, h, w);
        let rows = self.tile_rows(w);
        let mut cols = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![0.0f32; kk * rows.min(h) * w]
        };
        for i in 0..x.n {
            let img = x.image(i);
            let dst = out.image_mut(i);
            if self.kernel == 1 {
                sgemm(self.out_ch, kk, hw, &self.weight.value, kk as isize, 1, img, hw as isize, 1, 0.0, dst, hw as isize, 1);
            } else {
                let mut y0 = 0;
                while y0 < h {
                    let y1 = (y0 + rows).min(h);
                    let npix = (y1 - y0) * w;
                    let tile = &mut cols[..kk * npix];
                    self.im2col(img, h, w, y0, y1, tile);
                    sgemm(
                        self.out_ch,
                        kk,
                        npix,
                        &self.weight.value,
                        kk as isize,
                        1,
                        tile,
                        npix as isize,
                        1,
                        0.0,
                        &mut dst[y0 * w..],
                        hw as isize,
                        1,
                    );
                    y0 = y1;
                }
            }
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.iter().enumerate() {
                    for v in &mut dst[o * hw..(o + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self
            .input
            .take()
            .expect("conv backward without a training-mode forward");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.patch_len();
        let mut dx = Tensor::zeros(x.n, x.c, h, w);
        let rows = self.tile_rows(w);
        let tile_len = kk * rows.min(h) * w;
        let mut cols = vec![0.0f32; if self.kernel == 1 { 0 } else { tile_len }];
        let mut dcols = vec![0.0f32; if self.kernel == 1 { 0 } else { tile_len }];
        for i in 0..x.n {
            let img = x.image(i);
            let g = dy.image(i);
            if let Some(b) = &mut self.bias {
                for o in 0..self.out_ch {
                    b.grad[o] += g[o * hw..(o + 1) * hw].iter().sum::<f32>();
                }
            }
            let dimg = dx.image_mut(i);
            if self.kernel == 1 {
                // dW += dY · Xᵀ ; dX = Wᵀ · dY
                sgemm(self.out_ch, hw, kk, g, hw as isize, 1, img, 1, hw as isize, 1.0, &mut self.weight.grad, kk as isize, 1);
                sgemm(kk, self.out_ch, hw, &self.weight.value, 1, kk as isize, g, hw as isize, 1, 0.0, dimg, hw as isize, 1);
                continue;
            }
            let mut y0 = 0;
            while y0 < h {
                let y1 = (y0 + rows).min(h);
                let npix = (y1 - y0) * w;
                let tile = &mut cols[..kk * npix];
                self.im2col(img, h, w, y0, y1, tile);
                let g_tile = &g[y0 * w..];
                sgemm(
                    self.out_ch,
                    npix,
                    kk,
                    g_tile,
                    hw as isize,
                    1,
                    tile,
                    1,
                    npix as isize,
                    1.0,
                    &mut self.weight.grad,
                    kk as isize,
                    1,
                );
                let dtile = &mut dcols[..kk * npix];
                sgemm(
                    kk,
                    self.out_ch,
                    npix,
                    &self.weight.value,
                    1,
                    kk as isize,
                    g_tile,
                    hw as isize,
                    1,
                    0.0,
                    dtile,
                    npix as isize,
                    1,
                );
                self.col2im(dtile, h, w, y0, y1, dimg);
                y0 = y1;
            }
        }
        dx
    }
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![1.0; channels],
            },
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let hw = x.plane();
        let count = (x.n * hw) as f64;
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        match mode {
            Mode::Eval => {
                for c in 0..x.c {
                    let scale = self.gamma.value[c] / (self.running_var.value[c] + self.eps).sqrt();
                    let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                    for i in 0..x.n {
                        let off = (i * x.c + c) * hw;
                        for (o, &v) in out.data[off..off + hw].iter_mut().zip(&x.data[off..off + hw]) {
                            *o = v * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
                let mut inv_std = vec![0.0f32; x.c];
                for c in 0..x.c {
                    let mut sum = 0.0f64;
                    for i in 0..x.n {
                        let off = (i * x.c + c) * hw;
                        sum += x.data[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut ss = 0.0f64;
                    for i in 0..x.n {
                        let off = (i * x.c + c) * hw;
                        ss += x.data[off..off + hw]
                            .iter()
                            .map(|&v| (v as f64 - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = ss / count;
                    let istd = 1.0 / (var + self.eps as f64).sqrt();
                    inv_std[c] = istd as f32;
                    let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                    for i in 0..x.n {
                        let off = (i * x.c + c) * hw;
                        for j in off..off + hw {
                            let xh = ((x.data[j] as f64 - mean) * istd) as f32;
                            xhat.data[j] = xh;
                            out.data[j] = g * xh + b;
                        }
                    }
                    let unbiased = if count > 1.0 { ss / (count - 1.0) } else { var };
                    let m = self.momentum;
                    self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean as f32;
                    self.running_var.value[c] = (1.0 - m) * self.running_var.value[c] + m * unbiased as f32;
                }
                self.cache = Some(BnCache { xhat, inv_std });
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .expect("batch norm backward without a training-mode forward");
        let hw = dy.plane();
        let m = (dy.n * hw) as f64;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..dy.n {
                let off = (i * dy.c + c) * hw;
                for j in off..off + hw {
                    sum_dy += dy.data[j] as f64;
                    sum_dy_xhat += dy.data[j] as f64 * xhat.data[j] as f64;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat as f32;
            self.beta.grad[c] += sum_dy as f32;
            let g = self.gamma.value[c] as f64;
            let k = g * inv_std[c] as f64 / m;
            for i in 0..dy.n {
                let off = (i * dy.c + c) * hw;
                for j in off..off + hw {
                    dx.data[j] = (k * (m * dy.data[j] as f64 - sum_dy - xhat.data[j] as f64 * sum_dy_xhat)) as f32;
                }
            }
        }
        dx
    }
}

/// In-place ReLU that remembers its output for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    output: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, mode: Mode) -> Tensor {
        for v in &mut x.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.output = (mode == Mode::Train).then(|| x.clone());
        x
    }

    pub fn backward(&mut self, mut dy: Tensor) -> Tensor {
        let out = self
            .output
            .take()
            .expect("relu backward without a training-mode forward");
        for (g, &o) in dy.data.iter_mut().zip(&out.data) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
        dy
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "max pool needs even dimensions");
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let train = mode == Mode::Train;
        let mut arg = if train { vec![0u32; out.data.len()] } else { Vec::new() };
        for p in 0..x.n * x.c {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * x.w + 2 * ox;
                    let cand = [base, base + 1, base + x.w, base + x.w + 1];
                    let mut best = cand[0];
                    for &c in &cand[1..] {
                        if src[c] > src[best] {
                            best = c;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data[o] = src[best];
                    if train {
                        arg[o] = best as u32;
                    }
                }
            }
        }
        self.argmax = train.then(|| (arg, x.shape()));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (arg, [n, c, h, w]) = self
            .argmax
            .take()
            .expect("max pool backward without a training-mode forward");
        let mut dx = Tensor::zeros(n, c, h, w);
        let out_plane = dy.plane();
        for p in 0..n * c {
            let d = &mut dx.data[p * h * w..(p + 1) * h * w];
            for j in 0..out_plane {
                let o = p * out_plane + j;
                d[arg[o] as usize] += dy.data[o];
            }
        }
        dx
    }
}

/// Source taps of one output coordinate for 2× bilinear upsampling with
/// half-pixel centres (align_corners = false).
#[derive(Debug, Clone, Copy)]
struct Taps {
    i0: usize,
    i1: usize,
    w1: f32,
}

fn upsample_taps(src: usize) -> Vec<Taps> {
    (0..2 * src)
        .map(|o| {
            let pos = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            Taps {
                i0,
                i1,
                w1: pos - i0 as f32,
            }
        })
        .collect()
}

/// Bilinear ×2 upsampling.
#[derive(Debug, Clone, Default)]
pub struct UpsampleBilinear2 {
    input_shape: Option<[usize; 4]>,
}

impl UpsampleBilinear2 {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let ty = upsample_taps(x.h);
        let tx = upsample_taps(x.w);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        for p in 0..x.n * x.c {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
            for (oy, t) in ty.iter().enumerate() {
                let r0 = &src[t.i0 * x.w..(t.i0 + 1) * x.w];
                let r1 = &src[t.i1 * x.w..(t.i1 + 1) * x.w];
                let row = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, s) in tx.iter().enumerate() {
                    let top = r0[s.i0] + (r0[s.i1] - r0[s.i0]) * s.w1;
                    let bot = r1[s.i0] + (r1[s.i1] - r1[s.i0]) * s.w1;
                    row[ox] = top + (bot - top) * t.w1;
                }
            }
        }
        self.input_shape = (mode == Mode::Train).then(|| x.shape());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = self
            .input_shape
            .take()
            .expect("upsample backward without a training-mode forward");
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = Tensor::zeros(n, c, h, w);
        for p in 0..n * c {
            let g = &dy.data[p * oh * ow..(p + 1) * oh * ow];
            let d = &mut dx.data[p * h * w..(p + 1) * h * w];
            for (oy, t) in ty.iter().enumerate() {
                for (ox, s) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    let top = v * (1.0 - t.w1);
                    let bot = v * t.w1;
                    d[t.i0 * w + s.i0] += top * (1.0 - s.w1);
                    d[t.i0 * w + s.i1] += top * s.w1;
                    d[t.i1 * w + s.i0] += bot * (1.0 - s.w1);
                    d[t.i1 * w + s.i1] += bot * s.w1;
                }
            }
        }
        dx
    }
}

/// Concatenates along channels, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial shapes");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.image_mut(i);
        let (da, db) = dst.split_at_mut(a.image(i).len());
        da.copy_from_slice(a.image(i));
        db.copy_from_slice(b.image(i));
    }
    out
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let second = x.c - first;
    let mut a = Tensor::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, second, x.h, x.w);
    for i in 0..x.n {
        let src = x.image(i);
        let cut = first * x.plane();
        a.image_mut(i).copy_from_slice(&src[..cut]);
        b.image_mut(i).copy_from_slice(&src[cut..]);
    }
    (a, b)
}

/// Numerically stable softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let hw = logits.plane();
    let c = logits.c;
    for i in 0..logits.n {
        let img = out.image_mut(i);
        for p in 0..hw {
            let mut max = f32::NEG_INFINITY;
            for k in 0..c {
                max = max.max(img[k * hw + p]);
            }
            let mut sum = 0.0f32;
            for k in 0..c {
                let e = (img[k * hw + p] - max).exp();
                img[k * hw + p] = e;
                sum += e;
            }
            for k in 0..c {
                img[k * hw + p] /= sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape[0],
            shape[1],
            shape[2],
            shape[3],
            (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    /// Direct convolution, used as an oracle for the im2col path.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut out = Tensor::zeros(x.n, conv.out_ch, x.h, x.w);
        for i in 0..x.n {
            for o in 0..conv.out_ch {
                for y in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]) as f64;
                        for c in 0..conv.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + ky - pad;
                                    let sx = xx + kx - pad;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * conv.in_ch + c) * conv.kernel + ky as usize) * conv.kernel + kx as usize];
                                    let xv = x.data[((i * x.c + c) * x.h + sy as usize) * x.w + sx as usize];
                                    acc += wv as f64 * xv as f64;
                                }
                            }
                        }
                        out.data[((i * conv.out_ch + o) * x.h + y as usize) * x.w + xx as usize] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, bias) in [(3, false), (3, true), (1, true)] {
            let mut conv = Conv2d::new("c", 3, 5, k, bias, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.1);
            }
            let x = random_tensor(&mut rng, [2, 3, 7, 6]);
            let fast = conv.forward(&x, Mode::Eval);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_tiling_matches_single_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new("c", 2, 3, 3, false, &mut rng);
        // 200 columns forces 40 rows per tile, so 96 rows span three tiles.
        let x = random_tensor(&mut rng, [1, 2, 96, 200]);
        let fast = conv.forward(&x, Mode::Eval);
        let slow = naive_conv(&conv, &x);
        let max = fast.data.iter().zip(&slow.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max < 1e-4);
    }

    /// <dy, J dx> == <Jᵀ dy, dx> checks each backward pass against its forward.
    fn adjoint_gap(forward: impl Fn(&Tensor) -> Tensor, backward_of: impl Fn(&Tensor, &Tensor) -> Tensor, shape: [usize; 4], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, shape);
        let y = forward(&x);
        let dy = random_tensor(&mut rng, y.shape());
        let dx = backward_of(&x, &dy);
        // Directional derivative by central differences.
        let v = random_tensor(&mut rng, shape);
        let eps = 1e-2f32;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for j in 0..x.data.len() {
            xp.data[j] += eps * v.data[j];
            xm.data[j] -= eps * v.data[j];
        }
        let fd = (dot(&dy, &forward(&xp)) - dot(&dy, &forward(&xm))) / (2.0 * eps as f64);
        let an = dot(&dx, &v);
        (fd - an).abs() / an.abs().max(1e-3)
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new("c", 3, 4, 3, true, &mut rng);
        let gap = adjoint_gap(
            |x| conv.clone().forward(x, Mode::Eval),
            |x, dy| {
                let mut c = conv.clone();
                c.forward(x, Mode::Train);
                c.backward(dy)
            },
            [2, 3, 6, 5],
            4,
        );
        assert!(gap < 1e-3, "{gap}");
    }

    #[test]
    fn conv_weight_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new("c", 2, 3, 3, true, &mut rng);
        let x = random_tensor(&mut rng, [2, 2, 5, 5]);
        let y = conv.forward(&x, Mode::Train);
        let dy = random_tensor(&mut rng, y.shape());
        conv.backward(&dy);
        for idx in [0usize, 7, 20, 53] {
            let mut plus = conv.clone();
            plus.weight.value[idx] += 1e-2;
            let mut minus = conv.clone();
            minus.weight.value[idx] -= 1e-2;
            let fd = (dot(&dy, &plus.forward(&x, Mode::Eval)) - dot(&dy, &minus.forward(&x, Mode::Eval))) / 2e-2;
            let an = conv.weight.grad[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * an.abs().max(1.0), "{idx}: {fd} vs {an}");
        }
        let b = conv.bias.as_ref().unwrap();
        for o in 0..3 {
            let expected: f32 = (0..2).map(|i| dy.image(i)[o * 25..(o + 1) * 25].iter().sum::<f32>()).sum();
            assert!((b.grad[o] - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn pointwise_conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = Conv2d::new("c", 3, 4, 1, true, &mut rng);
        let gap = adjoint_gap(
            |x| conv.clone().forward(x, Mode::Eval),
            |x, dy| {
                let mut c = conv.clone();
                c.forward(x, Mode::Train);
                c.backward(dy)
            },
            [2, 3, 4, 4],
            7,
        );
        assert!(gap < 1e-3, "{gap}");
    }

    #[test]
    fn batch_norm_backward() {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        let train_forward = |x: &Tensor| bn.clone().forward(x, Mode::Train);
        let gap = adjoint_gap(
            train_forward,
            |x, dy| {
                let mut b = bn.clone();
                b.forward(x, Mode::Train);
                b.backward(dy)
            },
            [2, 3, 4, 3],
            8,
        );
        assert!(gap < 1e-3, "{gap}");
    }

    #[test]
    fn batch_norm_normalizes_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, [3, 2, 4, 4]);
        let mut bn = BatchNorm2d::new("bn", 2);
        let y = bn.forward(&x, Mode::Train);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|i| y.image(i)[c * 16..(c + 1) * 16].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn pool_and_upsample_backward() {
        let gap = adjoint_gap(
            |x| MaxPool2::default().forward(x, Mode::Eval),
            |x, dy| {
                let mut p = MaxPool2::default();
                p.forward(x, Mode::Train);
                p.backward(dy)
            },
            [1, 2, 6, 4],
            10,
        );
        assert!(gap < 1e-3, "{gap}");
        let gap = adjoint_gap(
            |x| UpsampleBilinear2::default().forward(x, Mode::Eval),
            |x, dy| {
                let mut u = UpsampleBilinear2::default();
                u.forward(x, Mode::Train);
                u.backward(dy)
            },
            [2, 2, 3, 5],
            11,
        );
        assert!(gap < 1e-3, "{gap}");
    }

    #[test]
    fn upsample_preserves_constants_and_range() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = UpsampleBilinear2::default().forward(&x, Mode::Eval);
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        assert_eq!(y.data[0], 1.0);
        assert_eq!(y.data[15], 4.0);
        // Half-pixel centres: output column 1 samples input position 0.25.
        assert!((y.data[1] - 1.25).abs() < 1e-6);
        let c = Tensor::from_vec(1, 1, 3, 3, vec![7.0; 9]);
        assert!(UpsampleBilinear2::default()
            .forward(&c, Mode::Eval)
            .data
            .iter()
            .all(|&v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_tensor(&mut rng, [2, 3, 2, 2]);
        let b = random_tensor(&mut rng, [2, 1, 2, 2]);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = random_tensor(&mut rng, [2, 4, 3, 3]);
        x.data[0] = 80.0;
        let p = softmax_channels(&x);
        for i in 0..2 {
            for q in 0..9 {
                let s: f32 = (0..4).map(|k| p.image(i)[k * 9 + q]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
