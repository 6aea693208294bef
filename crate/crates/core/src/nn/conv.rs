//! Bias-free convolution kernels on `[channel][row][col]` tensors, lowered to
//! GEMM through patch matrices.

use serde::{Deserialize, Serialize};

/// A dense `[c][h][w]` activation map, column index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Row-major `C = op(A) * op(B) + beta * C` with `op(A)` of shape `m x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    /// `k x k`, stride 1, zero padding `k / 2`; weights `[cout][cin][k][k]`.
    Same(usize),
    /// `2 x 2`, stride 2; weights `[cout][cin][2][2]`.
    Down,
    /// Transposed `2 x 2`, stride 2; weights `[cin][cout][2][2]`.
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub offset: usize,
}

impl ConvLayer {
    pub fn weight_count(&self) -> usize {
        match self.kind {
            ConvKind::Same(k) => self.cout * self.cin * k * k,
            ConvKind::Down | ConvKind::Up => self.cout * self.cin * 4,
        }
    }

    /// Inputs feeding one output sample, used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            ConvKind::Same(k) => self.cin * k * k,
            ConvKind::Down => self.cin * 4,
            ConvKind::Up => self.cin,
        }
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_count()]
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Same(_) => (h, w),
            ConvKind::Down => (h / 2, w / 2),
            ConvKind::Up => (h * 2, w * 2),
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let w = self.weights(params);
        let (oh, ow) = self.output_dims(x.h, x.w);
        match self.kind {
            ConvKind::Same(k) => {
                let col = im2col(x, k);
                let mut out = Tensor::zeros(self.cout, oh, ow);
                gemm(self.cout, self.cin * k * k, oh * ow, w, false, &col, false, 0.0, &mut out.data);
                out
            }
            ConvKind::Down => {
                let col = space_to_depth(x);
                let mut out = Tensor::zeros(self.cout, oh, ow);
                gemm(self.cout, self.cin * 4, oh * ow, w, false, &col, false, 0.0, &mut out.data);
                out
            }
            ConvKind::Up => {
                let mut tmp = vec![0.0; self.cout * 4 * x.h * x.w];
                gemm(self.cout * 4, self.cin, x.h * x.w, w, true, &x.data, false, 0.0, &mut tmp);
                depth_to_space(&tmp, self.cout, x.h, x.w)
            }
        }
    }

    /// Gradient with respect to the input, given the output gradient.
    pub fn backward_input(&self, params: &[f64], gout: &Tensor) -> Tensor {
        debug_assert_eq!(gout.c, self.cout);
        let w = self.weights(params);
        match self.kind {
            ConvKind::Same(k) => {
                let n = gout.h * gout.w;
                let mut dcol = vec![0.0; self.cin * k * k * n];
                gemm(self.cin * k * k, self.cout, n, w, true, &gout.data, false, 0.0, &mut dcol);
                col2im(&dcol, self.cin, gout.h, gout.w, k)
            }
            ConvKind::Down => {
                let n = gout.h * gout.w;
                let mut dcol = vec![0.0; self.cin * 4 * n];
                gemm(self.cin * 4, self.cout, n, w, true, &gout.data, false, 0.0, &mut dcol);
                depth_to_space(&dcol, self.cin, gout.h, gout.w)
            }
            ConvKind::Up => {
                let (ih, iw) = (gout.h / 2, gout.w / 2);
                let gcol = space_to_depth(gout);
                let mut gx = Tensor::zeros(self.cin, ih, iw);
                gemm(self.cin, self.cout * 4, ih * iw, w, false, &gcol, false, 0.0, &mut gx.data);
                gx
            }
        }
    }

    /// Accumulates the weight gradient into `grad` (a full parameter-sized buffer).
    pub fn backward_weight(&self, x: &Tensor, gout: &Tensor, grad: &mut [f64]) {
        let count = self.weight_count();
        let g = &mut grad[self.offset..self.offset + count];
        match self.kind {
            ConvKind::Same(k) => {
                let col = im2col(x, k);
                gemm(self.cout, gout.h * gout.w, self.cin * k * k, &gout.data, false, &col, true, 1.0, g);
            }
            ConvKind::Down => {
                let col = space_to_depth(x);
                gemm(self.cout, gout.h * gout.w, self.cin * 4, &gout.data, false, &col, true, 1.0, g);
            }
            ConvKind::Up => {
                let gcol = space_to_depth(gout);
                gemm(self.cin, x.h * x.w, self.cout * 4, &x.data, false, &gcol, true, 1.0, g);
            }
        }
    }
}

/// Patch matrix `[(ci, ky, kx)][(y, x)]` for a same-size `k x k` convolution.
fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let pad = k / 2;
    let n = h * w;
    let mut col = vec![0.0; x.c * k * k * n];
    for ci in 0..x.c {
        let plane = &x.data[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let shift = kx as isize - pad as isize;
                    let (x_lo, x_hi) = (
                        (-shift).max(0) as usize,
                        (w as isize - shift).min(w as isize).max(0) as usize,
                    );
                    for xo in x_lo..x_hi {
                        dst[xo] = src[(xo as isize + shift) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto a `c x h x w` map.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let pad = k / 2;
    let n = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let shift = kx as isize - pad as isize;
                    let (x_lo, x_hi) = (
                        (-shift).max(0) as usize,
                        (w as isize - shift).min(w as isize).max(0) as usize,
                    );
                    for xo in x_lo..x_hi {
                        dst[(xo as isize + shift) as usize] += src[xo];
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping `2 x 2` patches: `[(ci, ky, kx)][(y, x)]` over the half-size grid.
fn space_to_depth(x: &Tensor) -> Vec<f64> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let n = oh * ow;
    let mut col = vec![0.0; x.c * 4 * n];
    for ci in 0..x.c {
        for ky in 0..2 {
            for kx in 0..2 {
                let row = &mut col[(ci * 4 + ky * 2 + kx) * n..][..n];
                for y in 0..oh {
                    let src = &x.data[(ci * x.h + 2 * y + ky) * x.w..][..x.w];
                    for xo in 0..ow {
                        row[y * ow + xo] = src[2 * xo + kx];
                    }
                }
            }
        }
    }
    col
}

/// Inverse of [`space_to_depth`]: `[(c, ky, kx)][(y, x)]` onto a `c x 2h x 2w` map.
fn depth_to_space(col: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ci in 0..c {
        for ky in 0..2 {
            for kx in 0..2 {
                let row = &col[(ci * 4 + ky * 2 + kx) * n..][..n];
                for y in 0..h {
                    let dst = &mut out.data[(ci * 2 * h + 2 * y + ky) * 2 * w..][..2 * w];
                    for xo in 0..w {
                        dst[2 * xo + kx] = row[y * w + xo];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct-loop convolutions, independent of the patch-matrix path.
    fn naive(layer: &ConvLayer, w: &[f64], x: &Tensor) -> Tensor {
        let (oh, ow) = layer.output_dims(x.h, x.w);
        let mut out = Tensor::zeros(layer.cout, oh, ow);
        match layer.kind {
            ConvKind::Same(k) => {
                let pad = (k / 2) as isize;
                for co in 0..layer.cout {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..layer.cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let sy = y as isize + ky as isize - pad;
                                        let sx = xx as isize + kx as isize - pad;
                                        if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                            continue;
                                        }
                                        acc += w[((co * layer.cin + ci) * k + ky) * k + kx]
                                            * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                                    }
                                }
                            }
                            out.data[(co * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
            ConvKind::Down => {
                for co in 0..layer.cout {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..layer.cin {
                                for ky in 0..2 {
                                    for kx in 0..2 {
                                        acc += w[((co * layer.cin + ci) * 2 + ky) * 2 + kx]
                                            * x.data[(ci * x.h + 2 * y + ky) * x.w + 2 * xx + kx];
                                    }
                                }
                            }
                            out.data[(co * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
            ConvKind::Up => {
                for ci in 0..layer.cin {
                    for co in 0..layer.cout {
                        for y in 0..x.h {
                            for xx in 0..x.w {
                                for ky in 0..2 {
                                    for kx in 0..2 {
                                        out.data[(co * oh + 2 * y + ky) * ow + 2 * xx + kx] += w
                                            [((ci * layer.cout + co) * 2 + ky) * 2 + kx]
                                            * x.data[(ci * x.h + y) * x.w + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn layers() -> Vec<ConvLayer> {
        vec![
            ConvLayer { kind: ConvKind::Same(3), cin: 3, cout: 4, offset: 0 },
            ConvLayer { kind: ConvKind::Same(1), cin: 2, cout: 3, offset: 0 },
            ConvLayer { kind: ConvKind::Same(5), cin: 2, cout: 2, offset: 0 },
            ConvLayer { kind: ConvKind::Down, cin: 3, cout: 5, offset: 0 },
            ConvLayer { kind: ConvKind::Up, cin: 4, cout: 2, offset: 0 },
        ]
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for layer in layers() {
            let w = random(layer.weight_count(), &mut rng);
            let x = Tensor::from_vec(layer.cin, 6, 8, random(layer.cin * 48, &mut rng));
            let got = layer.forward(&w, &x);
            let want = naive(&layer, &w, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "{:?}", layer.kind);
            }
        }
    }

    #[test]
    fn backward_passes_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for layer in layers() {
            let w = random(layer.weight_count(), &mut rng);
            let x = Tensor::from_vec(layer.cin, 6, 8, random(layer.cin * 48, &mut rng));
            let (oh, ow) = layer.output_dims(6, 8);
            let g = Tensor::from_vec(layer.cout, oh, ow, random(layer.cout * oh * ow, &mut rng));
            // <conv(w, x), g> = <x, conv^T(w, g)> = <w, dW(x, g)>
            let lhs = layer.forward(&w, &x).dot(&g);
            let via_input = x.dot(&layer.backward_input(&w, &g));
            let mut dw = vec![0.0; w.len()];
            layer.backward_weight(&x, &g, &mut dw);
            let via_weight: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_input).abs() < 1e-10 * lhs.abs().max(1.0), "{:?}", layer.kind);
            assert!((lhs - via_weight).abs() < 1e-10 * lhs.abs().max(1.0), "{:?}", layer.kind);
        }
    }
}
