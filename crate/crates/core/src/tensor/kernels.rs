//! Plain loops for the few heavy kernels. Every output element is produced
//! by one sequential reduction, so splitting rows across threads does not
//! change any bit of the result.

use super::threads;

const PAR_MIN_WORK: usize = 1 << 16;

/// Runs `f(row_index, row_slice)` over the rows of `out`, in parallel when
/// more than one thread is configured and the work is large enough.
fn for_rows<F>(out: &mut [f32], cols: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let rows = if cols == 0 { 0 } else { out.len() / cols };
    let t = threads().min(rows.max(1));
    if t <= 1 || rows * work_per_row < PAR_MIN_WORK {
        for (i, row) in out.chunks_mut(cols).enumerate() {
            f(i, row);
        }
        return;
    }
    let per = rows.div_ceil(t);
    std::thread::scope(|s| {
        for (c, chunk) in out.chunks_mut(per * cols).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (i, row) in chunk.chunks_mut(cols).enumerate() {
                    f(c * per + i, row);
                }
            });
        }
    });
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for_rows(out, n, k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(g: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize) {
    debug_assert_eq!(out.len(), m * k);
    for_rows(out, k, k * n, |i, row| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f32;
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    });
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn(a: &[f32], g: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for_rows(out, n, m * n, |i, row| {
        for p in 0..m {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let grow = &g[p * n..(p + 1) * n];
            for (o, &gv) in row.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    });
}

/// Geometry of a stride-1 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }
    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }
    pub fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
    pub fn positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x[B,C,H,W]` into `[B·H'·W', C·k·k]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let mut cols = vec![0.0; g.positions() * patch];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for c in 0..g.in_ch {
                    for ky in 0..g.kernel {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let src = ((b * g.in_ch + c) * g.height + iy as usize) * g.width
                                + ix as usize;
                            cols[row + (c * g.kernel + ky) * g.kernel + kx] = x[src];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for c in 0..g.in_ch {
                    for ky in 0..g.kernel {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let dst = ((b * g.in_ch + c) * g.height + iy as usize) * g.width
                                + ix as usize;
                            dx[dst] += cols[row + (c * g.kernel + ky) * g.kernel + kx];
                        }
                    }
                }
            }
        }
    }
}
