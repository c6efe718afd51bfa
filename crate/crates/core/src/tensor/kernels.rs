//! Raw convolution kernels on planar f32 buffers.
//!
//! Three bilinear primitives: the valid correlation (`conv2d`) plus its two
//! adjoints (`conv2d_input_grad`, `conv2d_weight_grad`). The set is closed
//! under differentiation, which is what makes grad-of-grad work in the tape.
//! All variants iterate output chunks in a fixed order, so execution mode
//! never changes results.

use crate::parallel::{for_each_chunk, Exec};

/// Valid correlation: x `[ci, h, w]`, wt `[co, ci, k, k]` ->
/// `[co, h-k+1, w-k+1]`.
pub fn conv2d(
    exec: Exec,
    x: &[f32],
    (ci, h, w): (usize, usize, usize),
    wt: &[f32],
    (co, k): (usize, usize),
) -> Vec<f32> {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(wt.len(), co * ci * k * k);
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut out = vec![0.0f32; co * oh * ow];
    for_each_chunk(exec, &mut out, oh * ow, |o, chunk| {
        for oy in 0..oh {
            let row = &mut chunk[oy * ow..(oy + 1) * ow];
            for c in 0..ci {
                for ky in 0..k {
                    let xrow = &x[(c * h + oy + ky) * w..(c * h + oy + ky) * w + w];
                    let wrow = &wt[((o * ci + c) * k + ky) * k..((o * ci + c) * k + ky) * k + k];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        let xs = &xrow[kx..kx + ow];
                        for (r, &xv) in row.iter_mut().zip(xs) {
                            *r += wv * xv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of `conv2d` in its first argument: g `[co, oh, ow]`,
/// wt `[co, ci, k, k]` -> `[ci, h, w]` with `h = oh + k - 1`.
pub fn conv2d_input_grad(
    exec: Exec,
    g: &[f32],
    (co, oh, ow): (usize, usize, usize),
    wt: &[f32],
    (ci, k): (usize, usize),
) -> Vec<f32> {
    debug_assert_eq!(g.len(), co * oh * ow);
    debug_assert_eq!(wt.len(), co * ci * k * k);
    let h = oh + k - 1;
    let w = ow + k - 1;
    let mut out = vec![0.0f32; ci * h * w];
    for_each_chunk(exec, &mut out, h * w, |c, chunk| {
        for o in 0..co {
            for ky in 0..k {
                for oy in 0..oh {
                    let grow = &g[(o * oh + oy) * ow..(o * oh + oy) * ow + ow];
                    let xrow = &mut chunk[(oy + ky) * w..(oy + ky) * w + w];
                    let wrow =
                        &wt[((o * ci + c) * k + ky) * k..((o * ci + c) * k + ky) * k + k];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        let xs = &mut xrow[kx..kx + ow];
                        for (r, &gv) in xs.iter_mut().zip(grow) {
                            *r += wv * gv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of `conv2d` in its weight argument: x `[ci, h, w]`,
/// g `[co, oh, ow]` -> `[co, ci, k, k]`.
pub fn conv2d_weight_grad(
    exec: Exec,
    x: &[f32],
    (ci, h, w): (usize, usize, usize),
    g: &[f32],
    (co, oh, ow): (usize, usize, usize),
    k: usize,
) -> Vec<f32> {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(g.len(), co * oh * ow);
    debug_assert_eq!(h, oh + k - 1);
    debug_assert_eq!(w, ow + k - 1);
    let mut out = vec![0.0f32; co * ci * k * k];
    for_each_chunk(exec, &mut out, ci * k * k, |o, chunk| {
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0f64;
                    for oy in 0..oh {
                        let grow = &g[(o * oh + oy) * ow..(o * oh + oy) * ow + ow];
                        let xrow = &x[(c * h + oy + ky) * w + kx..(c * h + oy + ky) * w + kx + ow];
                        let mut dot = 0.0f32;
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            dot += gv * xv;
                        }
                        acc += dot as f64;
                    }
                    chunk[(c * k + ky) * k + kx] = acc as f32;
                }
            }
        }
    });
    out
}

/// Zero-pad each plane of `[c, h, w]` by `pad` pixels per side.
pub fn zero_pad(x: &[f32], (c, h, w): (usize, usize, usize), pad: usize) -> Vec<f32> {
    let nh = h + 2 * pad;
    let nw = w + 2 * pad;
    let mut out = vec![0.0f32; c * nh * nw];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y) * w + w];
            let dst_off = (ch * nh + y + pad) * nw + pad;
            out[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
    out
}

/// Remove `pad` pixels per side of each plane of `[c, h, w]`.
pub fn crop(x: &[f32], (c, h, w): (usize, usize, usize), pad: usize) -> Vec<f32> {
    let nh = h - 2 * pad;
    let nw = w - 2 * pad;
    let mut out = vec![0.0f32; c * nh * nw];
    for ch in 0..c {
        for y in 0..nh {
            let src_off = (ch * h + y + pad) * w + pad;
            let dst = &mut out[(ch * nh + y) * nw..(ch * nh + y) * nw + nw];
            dst.copy_from_slice(&x[src_off..src_off + nw]);
        }
    }
    out
}
