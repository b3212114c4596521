//! Raw numeric kernels behind the graph ops.
//!
//! Single-threaded, fixed reduction order, so results are bit-reproducible.
//! Convolutions are 3x3, stride 1, zero-padded "same", with an optional
//! dilation; the three conv kernels (forward, input-adjoint, kernel-adjoint)
//! are mutual adjoints and closed under differentiation, which is what lets
//! the graph express gradients of gradients as ordinary nodes.

use crate::tensor::Tensor;

/// y[o,h,w] = b[o] + sum_{i,ky,kx} x[i, h+dy, w+dx] * k[o,i,ky,kx],
/// dy = (ky-1)*dil, dx = (kx-1)*dil, zero outside the image.
pub fn conv3x3(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, dil: usize) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[0];
    let mut out = match bias {
        Some(b) => {
            let mut data = Vec::with_capacity(co * h * w);
            for o in 0..co {
                data.extend(std::iter::repeat(b.data()[o]).take(h * w));
            }
            Tensor::from_vec(&[co, h, w], data).unwrap()
        }
        None => Tensor::zeros(&[co, h, w]),
    };
    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    for o in 0..co {
        for i in 0..ci {
            let xc = &xd[i * h * w..(i + 1) * h * w];
            let oc = &mut od[o * h * w..(o + 1) * h * w];
            for ky in 0..3usize {
                let dy = (ky as isize - 1) * dil as isize;
                for kx in 0..3usize {
                    let dx = (kx as isize - 1) * dil as isize;
                    let kv = kd[((o * ci + i) * 3 + ky) * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(oc, xc, h, w, dy, dx, kv);
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] w.r.t. its input:
/// xbar[i,h,w] = sum_{o,ky,kx} u[o, h-dy, w-dx] * k[o,i,ky,kx].
pub fn conv3x3_input_vjp(u: &Tensor, k: &Tensor, dil: usize) -> Tensor {
    let (co, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let ci = k.shape()[1];
    let mut out = Tensor::zeros(&[ci, h, w]);
    let ud = u.data();
    let kd = k.data();
    let od = out.data_mut();
    for o in 0..co {
        let uc = &ud[o * h * w..(o + 1) * h * w];
        for i in 0..ci {
            let oc = &mut od[i * h * w..(i + 1) * h * w];
            for ky in 0..3usize {
                let dy = (ky as isize - 1) * dil as isize;
                for kx in 0..3usize {
                    let dx = (kx as isize - 1) * dil as isize;
                    let kv = kd[((o * ci + i) * 3 + ky) * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(oc, uc, h, w, -dy, -dx, kv);
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] w.r.t. its kernel:
/// kbar[o,i,ky,kx] = sum_{h,w} u[o,h,w] * x[i, h+dy, w+dx].
pub fn conv3x3_kernel_vjp(x: &Tensor, u: &Tensor, dil: usize) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = u.shape()[0];
    let mut out = Tensor::zeros(&[co, ci, 3, 3]);
    let xd = x.data();
    let ud = u.data();
    let od = out.data_mut();
    for o in 0..co {
        let uc = &ud[o * h * w..(o + 1) * h * w];
        for i in 0..ci {
            let xc = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..3usize {
                let dy = (ky as isize - 1) * dil as isize;
                for kx in 0..3usize {
                    let dx = (kx as isize - 1) * dil as isize;
                    od[((o * ci + i) * 3 + ky) * 3 + kx] =
                        shifted_dot(uc, xc, h, w, dy, dx);
                }
            }
        }
    }
    out
}

/// out[y][x] += c * src[y+dy][x+dx] over the in-bounds region.
fn accumulate_shifted(out: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, c: f64) {
    let (y0, y1) = row_range(h, dy);
    let (x0, x1) = row_range(w, dx);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let dst = &mut out[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (d, s) in dst.iter_mut().zip(srow) {
            *d += c * s;
        }
    }
}

/// sum over in-bounds (y, x) of u[y][x] * v[y+dy][x+dx].
fn shifted_dot(u: &[f64], v: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = row_range(h, dy);
    let (x0, x1) = row_range(w, dx);
    if y0 >= y1 || x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let urow = &u[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let vrow = &v[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (a, b) in urow.iter().zip(vrow) {
            acc += a * b;
        }
    }
    acc
}

/// Valid output index range [lo, hi) such that index + shift stays in [0, n).
fn row_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 {
        n.saturating_sub(shift as usize)
    } else {
        n
    };
    (lo.min(n), hi)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out).unwrap()
}

/// Nearest-neighbour x2 upsampling of [c, h, w].
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let v = xd[(ch * h + y) * w + x_];
                let base = ch * h2 * w2;
                out[base + (2 * y) * w2 + 2 * x_] = v;
                out[base + (2 * y) * w2 + 2 * x_ + 1] = v;
                out[base + (2 * y + 1) * w2 + 2 * x_] = v;
                out[base + (2 * y + 1) * w2 + 2 * x_ + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[c, h2, w2], out).unwrap()
}

/// 2x2 block sum of [c, h, w] with even h, w. Adjoint of [`upsample2x`].
pub fn sumpool2x(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x_ in 0..w2 {
                let base = (ch * h + 2 * y) * w + 2 * x_;
                out[(ch * h2 + y) * w2 + x_] =
                    xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1];
            }
        }
    }
    Tensor::from_vec(&[c, h2, w2], out).unwrap()
}

/// Classic 5x5 second-order high-pass residual kernel, scaled by 1/12.
/// Symmetric under both axis flips, so the op is self-adjoint.
pub const HIGH_PASS_5X5: [[f64; 5]; 5] = [
    [-1.0, 2.0, -2.0, 2.0, -1.0],
    [2.0, -6.0, 8.0, -6.0, 2.0],
    [-2.0, 8.0, -12.0, 8.0, -2.0],
    [2.0, -6.0, 8.0, -6.0, 2.0],
    [-1.0, 2.0, -2.0, 2.0, -1.0],
];

/// Per-channel 5x5 high-pass residual, zero-padded "same".
pub fn residual5x5(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ch in 0..c {
        let xc = &xd[ch * h * w..(ch + 1) * h * w];
        let oc = &mut od[ch * h * w..(ch + 1) * h * w];
        for (ky, row) in HIGH_PASS_5X5.iter().enumerate() {
            let dy = ky as isize - 2;
            for (kx, &kv) in row.iter().enumerate() {
                let dx = kx as isize - 2;
                accumulate_shifted(oc, xc, h, w, dy, dx, kv / 12.0);
            }
        }
    }
    out
}
