//! Raw numeric kernels behind the graph operations.
//!
//! All kernels are sequential with a fixed accumulation order, so results
//! are bit-identical across runs. Inner loops run over contiguous slices
//! so the compiler can vectorize them.

use super::Element;

/// out[m*n] += a[m*k] . b[k*n]
///
/// The k-loop is blocked by 4 so each sweep over the output row carries
/// four fused contributions; with narrow n (small channel counts) the
/// plain form spends most of its time on loop overhead.
pub fn matmul_nn_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let k4 = k - k % 4;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p < k4 {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                out_row[j] =
                    out_row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for (p, &aip) in a_row.iter().enumerate().skip(k4) {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bpj;
            }
        }
    }
}

/// out[m*n] += a[m*k] . b^T where b is [n*k]
pub fn matmul_nt_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out[k*n] += a^T . c where a is [m*k] and c is [m*n]
pub fn matmul_tn_acc<E: Element>(a: &[E], c: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cij) in out_row.iter_mut().zip(c_row) {
                *o = *o + aip * cij;
            }
        }
    }
}

/// Spatial extents of a convolution output, or None if non-positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output rows y for which row `y*stride + d - padding` lies inside the
/// input, as a half-open range.
#[inline]
fn valid_out_range(
    extent: usize,
    out_extent: usize,
    stride: usize,
    padding: usize,
    d: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(d).div_ceil(stride);
    let hi = if extent + padding > d {
        ((extent + padding - d - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Direct convolution forward: for every kernel coefficient, add a scaled
/// shifted copy of the input plane onto the output plane. No patch matrix
/// is materialized and the stride-1 inner loop runs over contiguous rows.
/// `out` must be zeroed, laid out [B,O,OH,OW].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct_fwd<E: Element>(
    x: &[E],
    k: &[E],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let same_3x3 = kh == 3
        && kw == 3
        && stride == 1
        && padding == 1
        && oh == height
        && ow == width
        && width >= 2;
    for b in 0..batch {
        for oi in 0..out_ch {
            let out_plane = &mut out[(b * out_ch + oi) * oh * ow..(b * out_ch + oi + 1) * oh * ow];
            for c in 0..channels {
                let x_plane = &x[(b * channels + c) * height * width..];
                if same_3x3 {
                    // one pass per (c, dy) with the three column taps fused
                    let krow_base = ((oi * channels + c) * 3) * 3;
                    for dy in 0..3 {
                        let k0 = k[krow_base + dy * 3];
                        let k1 = k[krow_base + dy * 3 + 1];
                        let k2 = k[krow_base + dy * 3 + 2];
                        let (y0, y1) = valid_out_range(height, oh, 1, 1, dy);
                        for y in y0..y1 {
                            let iy = y + dy - 1;
                            let xrow = &x_plane[iy * width..(iy + 1) * width];
                            let orow = &mut out_plane[y * ow..(y + 1) * ow];
                            orow[0] = orow[0] + k1 * xrow[0] + k2 * xrow[1];
                            for xx in 1..width - 1 {
                                orow[xx] = orow[xx]
                                    + k0 * xrow[xx - 1]
                                    + k1 * xrow[xx]
                                    + k2 * xrow[xx + 1];
                            }
                            let last = width - 1;
                            orow[last] = orow[last] + k0 * xrow[last - 1] + k1 * xrow[last];
                        }
                    }
                    continue;
                }
                for dy in 0..kh {
                    let (y0, y1) = valid_out_range(height, oh, stride, padding, dy);
                    for dx in 0..kw {
                        let kv = k[((oi * channels + c) * kh + dy) * kw + dx];
                        let (x0, x1) = valid_out_range(width, ow, stride, padding, dx);
                        if x1 <= x0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y * stride + dy - padding;
                            let src_base = iy * width + x0 * stride + dx - padding;
                            let orow = &mut out_plane[y * ow + x0..y * ow + x1];
                            if stride == 1 {
                                let xrow = &x_plane[src_base..src_base + (x1 - x0)];
                                for (o, &xv) in orow.iter_mut().zip(xrow) {
                                    *o = *o + kv * xv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o = *o + kv * x_plane[src_base + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d_direct_fwd`] w.r.t. the input: scatter each output
/// gradient back through the kernel coefficient that produced it.
/// Accumulates into `gx`, laid out [B,C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct_grad_input<E: Element>(
    go: &[E],
    k: &[E],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    gx: &mut [E],
) {
    let same_3x3 = kh == 3
        && kw == 3
        && stride == 1
        && padding == 1
        && oh == height
        && ow == width
        && width >= 2;
    for b in 0..batch {
        for oi in 0..out_ch {
            let go_plane = &go[(b * out_ch + oi) * oh * ow..(b * out_ch + oi + 1) * oh * ow];
            for c in 0..channels {
                let gx_plane = &mut gx[(b * channels + c) * height * width
                    ..(b * channels + c + 1) * height * width];
                if same_3x3 {
                    // adjoint of the fused pass: gather the three shifted
                    // output-gradient taps per input row
                    let krow_base = ((oi * channels + c) * 3) * 3;
                    for dy in 0..3 {
                        let k0 = k[krow_base + dy * 3];
                        let k1 = k[krow_base + dy * 3 + 1];
                        let k2 = k[krow_base + dy * 3 + 2];
                        let (y0, y1) = valid_out_range(height, oh, 1, 1, dy);
                        for y in y0..y1 {
                            let iy = y + dy - 1;
                            let grow = &go_plane[y * ow..(y + 1) * ow];
                            let gxrow = &mut gx_plane[iy * width..(iy + 1) * width];
                            gxrow[0] = gxrow[0] + k1 * grow[0] + k0 * grow[1];
                            for ix in 1..width - 1 {
                                gxrow[ix] = gxrow[ix]
                                    + k2 * grow[ix - 1]
                                    + k1 * grow[ix]
                                    + k0 * grow[ix + 1];
                            }
                            let last = width - 1;
                            gxrow[last] = gxrow[last] + k2 * grow[last - 1] + k1 * grow[last];
                        }
                    }
                    continue;
                }
                for dy in 0..kh {
                    let (y0, y1) = valid_out_range(height, oh, stride, padding, dy);
                    for dx in 0..kw {
                        let kv = k[((oi * channels + c) * kh + dy) * kw + dx];
                        let (x0, x1) = valid_out_range(width, ow, stride, padding, dx);
                        if x1 <= x0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y * stride + dy - padding;
                            let dst_base = iy * width + x0 * stride + dx - padding;
                            let grow = &go_plane[y * ow + x0..y * ow + x1];
                            if stride == 1 {
                                let gxrow = &mut gx_plane[dst_base..dst_base + (x1 - x0)];
                                for (g, &ov) in gxrow.iter_mut().zip(grow) {
                                    *g = *g + kv * ov;
                                }
                            } else {
                                for (j, &ov) in grow.iter().enumerate() {
                                    let idx = dst_base + j * stride;
                                    gx_plane[idx] = gx_plane[idx] + kv * ov;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfold x[b,c,h,w] into patch rows.
///
/// Output layout: `cols[(b*oh*ow + y*ow + x) * (c*kh*kw) + (ci*kh*kw + dy*kw + dx)]`,
/// with zeros where the kernel window leaves the padded image.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    x: &[E],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let patch = channels * kh * kw;
    let mut cols = vec![E::ZERO; batch * oh * ow * patch];
    for b in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                let row = ((b * oh + y) * ow + xx) * patch;
                for c in 0..channels {
                    let plane = (b * channels + c) * height * width;
                    for dy in 0..kh {
                        let iy = (y * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let src = plane + iy as usize * width;
                        let dst = row + c * kh * kw + dy * kw;
                        for dx in 0..kw {
                            let ix = (xx * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            cols[dst + dx] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-row gradients back onto the input, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Element>(
    cols: &[E],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let patch = channels * kh * kw;
    debug_assert_eq!(cols.len(), batch * oh * ow * patch);
    debug_assert_eq!(out.len(), batch * channels * height * width);
    for b in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                let row = ((b * oh + y) * ow + xx) * patch;
                for c in 0..channels {
                    let plane = (b * channels + c) * height * width;
                    for dy in 0..kh {
                        let iy = (y * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let dst = plane + iy as usize * width;
                        let src = row + c * kh * kw + dy * kw;
                        for dx in 0..kw {
                            let ix = (xx * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            out[dst + ix as usize] = out[dst + ix as usize] + cols[src + dx];
                        }
                    }
                }
            }
        }
    }
}
