// Raw loops behind the differentiable ops. All buffers are row-major
// [N, C, D, H, W]. Every parallel chunk is computed sequentially, so results
// do not depend on the worker count.

use rayon::prelude::*;

/// Output length of a strided, zero-padded convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_size(&self) -> usize {
        self.input.iter().product()
    }
    fn out_size(&self) -> usize {
        self.output.iter().product()
    }
    fn k_size(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output indices `lo..hi` along `axis` whose tap `k` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, len) = (self.stride[axis], self.pad[axis], self.input[axis]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if len + p < k + 1 {
            return (0, 0);
        }
        let hi = ((len - 1 + p - k) / s + 1).min(self.output[axis]);
        (lo, hi.max(lo))
    }
}

// Largest im2col block, in elements.
const COL_BUDGET: usize = 1 << 21;

impl ConvGeom {
    fn plane_out(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output z-slices per im2col block.
    fn z_block(&self) -> usize {
        let k = self.cin * self.k_size();
        (COL_BUDGET / (k * self.plane_out()).max(1)).clamp(1, self.output[0])
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

fn taps(kernel: [usize; 3]) -> impl Iterator<Item = (usize, [usize; 3])> {
    let [kd, kh, kw] = kernel;
    (0..kd * kh * kw).map(move |i| (i, [i / (kh * kw), (i / kw) % kh, i % kw]))
}

// Visit every (column offset, input offset, x-range) triple of one tap for the
// output z-slices z0..z1. Column offsets are relative to the block.
fn for_each_row(g: &ConvGeom, k: [usize; 3], z0: usize, z1: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (zlo, zhi) = g.valid(0, k[0]);
    let (ylo, yhi) = g.valid(1, k[1]);
    let (xlo, xhi) = g.valid(2, k[2]);
    let (zlo, zhi) = (zlo.max(z0), zhi.min(z1));
    if zlo >= zhi || ylo >= yhi || xlo >= xhi {
        return;
    }
    let [ih, iw] = [g.input[1], g.input[2]];
    let [oh, ow] = [g.output[1], g.output[2]];
    for oz in zlo..zhi {
        let iz = oz * g.stride[0] + k[0] - g.pad[0];
        for oy in ylo..yhi {
            let iy = oy * g.stride[1] + k[1] - g.pad[1];
            let col_row = ((oz - z0) * oh + oy) * ow;
            let ix0 = xlo * g.stride[2] + k[2] - g.pad[2];
            f(col_row, (iz * ih + iy) * iw + ix0, xlo, xhi);
        }
    }
}

// col[(ci * taps + t) * width + p] for output positions of slices z0..z1.
fn im2col(g: &ConvGeom, src: &[f64], z0: usize, z1: usize, col: &mut [f64]) {
    let (isz, ksz) = (g.in_size(), g.k_size());
    let width = (z1 - z0) * g.plane_out();
    let sx = g.stride[2];
    col[..g.cin * ksz * width].fill(0.0);
    for ci in 0..g.cin {
        let plane = &src[ci * isz..][..isz];
        for (t, k) in taps(g.kernel) {
            let row = &mut col[(ci * ksz + t) * width..][..width];
            for_each_row(g, k, z0, z1, |c, i, xlo, xhi| {
                let dst = &mut row[c + xlo..c + xhi];
                if sx == 1 {
                    dst.copy_from_slice(&plane[i..i + dst.len()]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = plane[i + j * sx];
                    }
                }
            });
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], z0: usize, z1: usize, dst: &mut [f64]) {
    let (isz, ksz) = (g.in_size(), g.k_size());
    let width = (z1 - z0) * g.plane_out();
    let sx = g.stride[2];
    for ci in 0..g.cin {
        let plane = &mut dst[ci * isz..][..isz];
        for (t, k) in taps(g.kernel) {
            let row = &col[(ci * ksz + t) * width..][..width];
            for_each_row(g, k, z0, z1, |c, i, xlo, xhi| {
                let src = &row[c + xlo..c + xhi];
                if sx == 1 {
                    for (d, s) in plane[i..i + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    for (j, s) in src.iter().enumerate() {
                        plane[i + j * sx] += s;
                    }
                }
            });
        }
    }
}

// c = alpha * a * b + beta * c with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
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
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted bounds keep every strided access inside the slices,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

// Direct loops for large kernels with few channels, where im2col would
// replicate the input hundreds of times.
fn use_direct(g: &ConvGeom) -> bool {
    g.k_size() > 27
}

fn direct_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (isz, osz, ksz) = (g.in_size(), g.out_size(), g.k_size());
    let sx = g.stride[2];
    let mut out = vec![0.0; g.n * g.cout * osz];
    out.par_chunks_mut(osz).enumerate().for_each(|(idx, plane)| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for ci in 0..g.cin {
            let src = &input[(n * g.cin + ci) * isz..][..isz];
            let wbase = (co * g.cin + ci) * ksz;
            for (t, k) in taps(g.kernel) {
                let w = weight[wbase + t];
                for_each_row(g, k, 0, g.output[0], |orow, i, xlo, xhi| {
                    let o = &mut plane[orow + xlo..orow + xhi];
                    if sx == 1 {
                        for (o, v) in o.iter_mut().zip(&src[i..]) {
                            *o += w * v;
                        }
                    } else {
                        for (j, o) in o.iter_mut().enumerate() {
                            *o += w * src[i + j * sx];
                        }
                    }
                });
            }
        }
    });
    out
}

fn direct_grad_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let (isz, osz, ksz) = (g.in_size(), g.out_size(), g.k_size());
    let sx = g.stride[2];
    let mut gin = vec![0.0; g.n * g.cin * isz];
    gin.par_chunks_mut(isz).enumerate().for_each(|(idx, plane)| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let go = &grad_out[(n * g.cout + co) * osz..][..osz];
            let wbase = (co * g.cin + ci) * ksz;
            for (t, k) in taps(g.kernel) {
                let w = weight[wbase + t];
                for_each_row(g, k, 0, g.output[0], |orow, i, xlo, xhi| {
                    let go = &go[orow + xlo..orow + xhi];
                    if sx == 1 {
                        for (p, o) in plane[i..].iter_mut().zip(go) {
                            *p += w * o;
                        }
                    } else {
                        for (j, o) in go.iter().enumerate() {
                            plane[i + j * sx] += w * o;
                        }
                    }
                });
            }
        }
    });
    gin
}

fn direct_grad_weight(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let (isz, osz, ksz) = (g.in_size(), g.out_size(), g.k_size());
    let sx = g.stride[2];
    let mut gw = vec![0.0; g.cout * g.cin * ksz];
    gw.par_chunks_mut(g.cin * ksz).enumerate().for_each(|(co, wrow)| {
        for n in 0..g.n {
            let go = &grad_out[(n * g.cout + co) * osz..][..osz];
            for ci in 0..g.cin {
                let src = &input[(n * g.cin + ci) * isz..][..isz];
                for (t, k) in taps(g.kernel) {
                    let mut acc = 0.0;
                    for_each_row(g, k, 0, g.output[0], |orow, i, xlo, xhi| {
                        let go = &go[orow + xlo..orow + xhi];
                        if sx == 1 {
                            acc += go.iter().zip(&src[i..]).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for (j, o) in go.iter().enumerate() {
                                acc += o * src[i + j * sx];
                            }
                        }
                    });
                    wrow[ci * ksz + t] += acc;
                }
            }
        }
    });
    gw
}

/// Forward convolution of every sample: out = W * im2col(x) + b.
pub(crate) fn conv3d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    if use_direct(g) {
        return direct_forward(g, input, weight, bias);
    }
    let (isz, osz) = (g.in_size(), g.out_size());
    let kk = g.cin * g.k_size();
    let zb = g.z_block();
    let mut out = vec![0.0; g.n * g.cout * osz];
    out.par_chunks_mut(g.cout * osz).enumerate().for_each(|(n, dst)| {
        let src = &input[n * g.cin * isz..][..g.cin * isz];
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_mut(osz).enumerate() {
                plane.fill(b[co]);
            }
        }
        if g.is_pointwise() {
            gemm(g.cout, kk, osz, weight, (kk, 1), src, (osz, 1), 1.0, dst, (osz, 1));
            return;
        }
        let mut col = vec![0.0; kk * zb * g.plane_out()];
        for z0 in (0..g.output[0]).step_by(zb) {
            let z1 = (z0 + zb).min(g.output[0]);
            let width = (z1 - z0) * g.plane_out();
            im2col(g, src, z0, z1, &mut col);
            let off = z0 * g.plane_out();
            gemm(g.cout, kk, width, weight, (kk, 1), &col, (width, 1), 1.0, &mut dst[off..], (osz, 1));
        }
    });
    out
}

/// Gradient with respect to the input: col2im(W^T * grad_out).
pub(crate) fn conv3d_grad_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    if use_direct(g) {
        return direct_grad_input(g, grad_out, weight);
    }
    let (isz, osz) = (g.in_size(), g.out_size());
    let kk = g.cin * g.k_size();
    let zb = g.z_block();
    let mut gin = vec![0.0; g.n * g.cin * isz];
    gin.par_chunks_mut(g.cin * isz).enumerate().for_each(|(n, dst)| {
        let go = &grad_out[n * g.cout * osz..][..g.cout * osz];
        if g.is_pointwise() {
            gemm(kk, g.cout, osz, weight, (1, kk), go, (osz, 1), 0.0, dst, (osz, 1));
            return;
        }
        let mut col = vec![0.0; kk * zb * g.plane_out()];
        for z0 in (0..g.output[0]).step_by(zb) {
            let z1 = (z0 + zb).min(g.output[0]);
            let width = (z1 - z0) * g.plane_out();
            let off = z0 * g.plane_out();
            gemm(kk, g.cout, width, weight, (1, kk), &go[off..], (osz, 1), 0.0, &mut col, (width, 1));
            col2im(g, &col, z0, z1, dst);
        }
    });
    gin
}

/// Gradient with respect to the weight: sum over samples of grad_out * im2col(x)^T.
pub(crate) fn conv3d_grad_weight(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    if use_direct(g) {
        return direct_grad_weight(g, grad_out, input);
    }
    let (isz, osz) = (g.in_size(), g.out_size());
    let kk = g.cin * g.k_size();
    let zb = g.z_block();
    let partials: Vec<Vec<f64>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let src = &input[n * g.cin * isz..][..g.cin * isz];
            let go = &grad_out[n * g.cout * osz..][..g.cout * osz];
            let mut gw = vec![0.0; g.cout * kk];
            if g.is_pointwise() {
                gemm(g.cout, osz, kk, go, (osz, 1), src, (1, osz), 0.0, &mut gw, (kk, 1));
                return gw;
            }
            let mut col = vec![0.0; kk * zb * g.plane_out()];
            for z0 in (0..g.output[0]).step_by(zb) {
                let z1 = (z0 + zb).min(g.output[0]);
                let width = (z1 - z0) * g.plane_out();
                let off = z0 * g.plane_out();
                im2col(g, src, z0, z1, &mut col);
                gemm(g.cout, width, kk, &go[off..], (osz, 1), &col, (1, width), 1.0, &mut gw, (kk, 1));
            }
            gw
        })
        .collect();
    let mut total = vec![0.0; g.cout * kk];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

pub(crate) fn channel_sums(n: usize, c: usize, plane: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (idx, chunk) in data.chunks(plane).enumerate().take(n * c) {
        out[idx % c] += chunk.iter().sum::<f64>();
    }
    out
}

/// Per-(n, c) normalization. Returns (output, normalized values, 1/std per slice).
pub(crate) fn instance_norm_forward(
    n: usize,
    c: usize,
    plane: usize,
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; n * c * plane];
    let mut inv_std = vec![0.0; n * c];
    xhat.par_chunks_mut(plane)
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (xh, is))| {
            let x = &input[idx * plane..][..plane];
            let m = plane as f64;
            let mean = x.iter().sum::<f64>() / m;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            *is = 1.0 / (var + eps).sqrt();
            for (h, v) in xh.iter_mut().zip(x) {
                *h = (v - mean) * *is;
            }
        });
    let mut out = vec![0.0; n * c * plane];
    for (idx, (o, xh)) in out.chunks_mut(plane).zip(xhat.chunks(plane)).enumerate() {
        let ch = idx % c;
        for (o, h) in o.iter_mut().zip(xh) {
            *o = gamma[ch] * h + beta[ch];
        }
    }
    (out, xhat, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_len_matches_formula() {
        assert_eq!(conv_output_len(8, 3, 1, 1), Some(8));
        assert_eq!(conv_output_len(8, 3, 2, 1), Some(4));
        assert_eq!(conv_output_len(5, 3, 1, 0), Some(3));
        assert_eq!(conv_output_len(2, 3, 1, 0), None);
        assert_eq!(conv_output_len(4, 1, 0, 0), None);
    }
}
