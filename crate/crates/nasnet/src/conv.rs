//! Same-padded, stride-1 3D convolution via im2col and GEMM.
//!
//! Kernels are `(c_out, c_in, kz, ky, kx)` with odd extents; every output
//! voxel sees its input neighbourhood with zero padding at the border.

use crate::scalar::Scalar;

/// Upper bound on the im2col scratch size, in elements.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub spatial: [usize; 3],
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn rows(&self) -> usize {
        self.c_in * self.taps()
    }

    fn plane(&self) -> usize {
        self.spatial[1] * self.spatial[2]
    }

    fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    fn z_chunk(&self) -> usize {
        let per_plane = self.rows() * self.plane();
        (COL_BUDGET / per_plane.max(1)).clamp(1, self.spatial[0])
    }
}

/// Appends the im2col matrix (rows x cols, cols = planes in `[z0, z1)`) of
/// one sample to the cleared buffer `col`. Rows are produced in order, so the
/// buffer never needs zero-initialisation.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], z0: usize, z1: usize, col: &mut Vec<T>) {
    let [nz, ny, nx] = g.spatial;
    let [kz, ky, kx] = g.kernel;
    let (pz, py, px) = (kz / 2, ky / 2, kx / 2);
    col.clear();
    let zero = T::zero();
    for ci in 0..g.c_in {
        let xc = &x[ci * nz * ny * nx..(ci + 1) * nz * ny * nx];
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let x_lo = px.saturating_sub(dx);
                    let x_hi = (nx + px).saturating_sub(dx).min(nx);
                    for z in z0..z1 {
                        let iz = (z + dz) as isize - pz as isize;
                        if iz < 0 || iz >= nz as isize {
                            col.extend(std::iter::repeat_n(zero, ny * nx));
                            continue;
                        }
                        for y in 0..ny {
                            let iy = (y + dy) as isize - py as isize;
                            if iy < 0 || iy >= ny as isize || x_lo >= x_hi {
                                col.extend(std::iter::repeat_n(zero, nx));
                                continue;
                            }
                            let src_row = ((iz as usize) * ny + iy as usize) * nx;
                            let s0 = src_row + x_lo + dx - px;
                            col.extend(std::iter::repeat_n(zero, x_lo));
                            col.extend_from_slice(&xc[s0..s0 + (x_hi - x_lo)]);
                            col.extend(std::iter::repeat_n(zero, nx - x_hi));
                        }
                    }
                }
            }
        }
    }
}

/// `m x n` buffer for a GEMM that runs with `beta = 0`.
fn gemm_output<T: Scalar>(len: usize, fill: impl FnOnce(*mut T)) -> Vec<T> {
    let mut v = Vec::with_capacity(len);
    fill(v.as_mut_ptr());
    // SAFETY: with beta = 0 the GEMM writes every element of the output.
    unsafe { v.set_len(len) };
    v
}

/// Scatter-adds `col` back into one sample's input gradient.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], z0: usize, z1: usize, gx: &mut [T]) {
    let [nz, ny, nx] = g.spatial;
    let [kz, ky, kx] = g.kernel;
    let (pz, py, px) = (kz / 2, ky / 2, kx / 2);
    let cols = (z1 - z0) * ny * nx;
    let mut row = 0;
    for ci in 0..g.c_in {
        let gc = &mut gx[ci * nz * ny * nx..(ci + 1) * nz * ny * nx];
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let src = &col[row * cols..(row + 1) * cols];
                    let x_lo = px.saturating_sub(dx);
                    let x_hi = (nx + px).saturating_sub(dx).min(nx);
                    for z in z0..z1 {
                        let iz = (z + dz) as isize - pz as isize;
                        if iz < 0 || iz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let iy = (y + dy) as isize - py as isize;
                            if iy < 0 || iy >= ny as isize || x_lo >= x_hi {
                                continue;
                            }
                            let s = &src[((z - z0) * ny + y) * nx + x_lo..((z - z0) * ny + y) * nx + x_hi];
                            let d0 = ((iz as usize) * ny + iy as usize) * nx + x_lo + dx - px;
                            for (d, v) in gc[d0..d0 + s.len()].iter_mut().zip(s) {
                                *d += *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward pass over a batch. `x` is `(n, c_in, z, y, x)`, output `(n, c_out, z, y, x)`.
pub fn conv3d_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    forward_chunked(g, batch, x, w, bias, g.z_chunk())
}

fn forward_chunked<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], bias: Option<&[T]>, zc: usize) -> Vec<T> {
    let vox = g.voxels();
    let plane = g.plane();
    let k = g.rows();
    let mut col = Vec::with_capacity(if g.is_pointwise() { 0 } else { k * zc * plane });
    let mut out = gemm_output(batch * g.c_out * vox, |optr: *mut T| {
        for n in 0..batch {
            let xs = &x[n * g.c_in * vox..(n + 1) * g.c_in * vox];
            let os = unsafe { optr.add(n * g.c_out * vox) };
            if g.is_pointwise() {
                unsafe {
                    T::gemm(
                        g.c_out, k, vox, T::one(),
                        w.as_ptr(), k as isize, 1,
                        xs.as_ptr(), vox as isize, 1,
                        T::zero(), os, vox as isize, 1,
                    );
                }
                continue;
            }
            let mut z0 = 0;
            while z0 < g.spatial[0] {
                let z1 = (z0 + zc).min(g.spatial[0]);
                let cols = (z1 - z0) * plane;
                im2col(g, xs, z0, z1, &mut col);
                unsafe {
                    T::gemm(
                        g.c_out, k, cols, T::one(),
                        w.as_ptr(), k as isize, 1,
                        col.as_ptr(), cols as isize, 1,
                        T::zero(), os.add(z0 * plane), vox as isize, 1,
                    );
                }
                z0 = z1;
            }
        }
    });
    if let Some(b) = bias {
        for n in 0..batch {
            for (co, bv) in b.iter().enumerate() {
                for v in &mut out[(n * g.c_out + co) * vox..(n * g.c_out + co + 1) * vox] {
                    *v += *bv;
                }
            }
        }
    }
    out
}

/// Gradients of the convolution. Any of the outputs may be skipped.
pub struct ConvGrads<'a, T> {
    pub x: Option<&'a mut [T]>,
    pub w: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub fn conv3d_backward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], gout: &[T], grads: ConvGrads<'_, T>) {
    backward_chunked(g, batch, x, w, gout, grads, g.z_chunk())
}

fn backward_chunked<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    grads: ConvGrads<'_, T>,
    zc: usize,
) {
    let vox = g.voxels();
    let plane = g.plane();
    let k = g.rows();
    let ConvGrads { x: mut gx, w: mut gw, bias: gb } = grads;
    if let Some(gb) = gb {
        for n in 0..batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let s = &gout[(n * g.c_out + co) * vox..(n * g.c_out + co + 1) * vox];
                *acc += s.iter().copied().sum::<T>();
            }
        }
    }
    if gx.is_none() && gw.is_none() {
        return;
    }
    let mut col = Vec::with_capacity(if g.is_pointwise() { 0 } else { k * zc * plane });
    for n in 0..batch {
        let xs = &x[n * g.c_in * vox..(n + 1) * g.c_in * vox];
        let gs = &gout[n * g.c_out * vox..(n + 1) * g.c_out * vox];
        if g.is_pointwise() {
            if let Some(gw) = gw.as_deref_mut() {
                unsafe {
                    T::gemm(
                        g.c_out, vox, k, T::one(),
                        gs.as_ptr(), vox as isize, 1,
                        xs.as_ptr(), 1, vox as isize,
                        T::one(), gw.as_mut_ptr(), k as isize, 1,
                    );
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxs = &mut gx[n * g.c_in * vox..(n + 1) * g.c_in * vox];
                unsafe {
                    T::gemm(
                        k, g.c_out, vox, T::one(),
                        w.as_ptr(), 1, k as isize,
                        gs.as_ptr(), vox as isize, 1,
                        T::one(), gxs.as_mut_ptr(), vox as isize, 1,
                    );
                }
            }
            continue;
        }
        let mut z0 = 0;
        while z0 < g.spatial[0] {
            let z1 = (z0 + zc).min(g.spatial[0]);
            let cols = (z1 - z0) * plane;
            let gchunk = unsafe { gs.as_ptr().add(z0 * plane) };
            if let Some(gw) = gw.as_deref_mut() {
                im2col(g, xs, z0, z1, &mut col);
                unsafe {
                    T::gemm(
                        g.c_out, cols, k, T::one(),
                        gchunk, vox as isize, 1,
                        col.as_ptr(), 1, cols as isize,
                        T::one(), gw.as_mut_ptr(), k as isize, 1,
                    );
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gcol = gemm_output(k * cols, |c| unsafe {
                    T::gemm(
                        k, g.c_out, cols, T::one(),
                        w.as_ptr(), 1, k as isize,
                        gchunk, vox as isize, 1,
                        T::zero(), c, cols as isize, 1,
                    );
                });
                let gxs = &mut gx[n * g.c_in * vox..(n + 1) * g.c_in * vox];
                col2im(g, &gcol, z0, z1, gxs);
            }
            z0 = z1;
        }
    }
}
