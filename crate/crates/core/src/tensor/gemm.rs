//! Packed, register-blocked matrix multiply.
//!
//! Every output element is accumulated as `c += a[i][l] * b[l][j]` with `l`
//! strictly ascending and a separate multiply and add (no fused multiply-add),
//! so the result is bit-identical to the scalar triple loop regardless of
//! which SIMD width the CPU offers. Tile sizes only change how many elements
//! are in flight, never the per-element operation sequence.

use std::sync::OnceLock;

use super::Scalar;

/// Strided read-only view of a row-major (or transposed) matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    /// Contiguous row-major `rows x cols` view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of the transpose of a contiguous row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Isa {
    Base,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

pub(crate) fn detected_isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            match std::env::var("LOCAL_ERROR_GEMM").as_deref() {
                Ok("base") => return Isa::Base,
                Ok("avx512") if is_x86_feature_detected!("avx512f") => return Isa::Avx512,
                _ => {}
            }
            // avx512 is opt-in: it ran slower than avx2 on some hosts
            if is_x86_feature_detected!("avx2") {
                return Isa::Avx2;
            }
        }
        Isa::Base
    })
}

const KC: usize = 256;
const MC: usize = 96;
const NC: usize = 2048;

/// `c = a * b` (or `c += a * b` when `accumulate`), with `c` contiguous row-major.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    gemm_with(detected_isa(), a, b, c, accumulate)
}

pub(crate) fn gemm_with<T: Scalar>(isa: Isa, a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, n) = (a.rows, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
    }
    if m == 0 || n == 0 || a.cols == 0 {
        return;
    }
    let wide = std::mem::size_of::<T>() <= 4;
    match isa {
        Isa::Base => {
            if wide {
                gemm_blocked::<T, 6, 8>(a, b, c)
            } else {
                gemm_blocked::<T, 6, 4>(a, b, c)
            }
        }
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe {
            if wide {
                gemm_avx2::<T, 6, 16>(a, b, c)
            } else {
                gemm_avx2::<T, 6, 8>(a, b, c)
            }
        },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe {
            if wide {
                gemm_avx512::<T, 4, 32>(a, b, c)
            } else {
                gemm_avx512::<T, 4, 16>(a, b, c)
            }
        },
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Scalar, const MR: usize, const NR: usize>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    gemm_blocked::<T, MR, NR>(a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512<T: Scalar, const MR: usize, const NR: usize>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    gemm_blocked::<T, MR, NR>(a, b, c)
}

#[inline(always)]
fn gemm_blocked<T: Scalar, const MR: usize, const NR: usize>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut bpack = vec![T::zero(); KC * NC.min(n.div_ceil(NR) * NR)];
    let mut apack = vec![T::zero(); MC.min(m.div_ceil(MR) * MR) * KC];

    let mut jc = 0;
    while jc < n {
        let nc = NC.min(n - jc);
        let mut pc = 0;
        while pc < k {
            let kc = KC.min(k - pc);
            pack_b::<T, NR>(&b, pc, kc, jc, nc, &mut bpack);
            let mut ic = 0;
            while ic < m {
                let mc = MC.min(m - ic);
                pack_a::<T, MR>(&a, ic, mc, pc, kc, &mut apack);
                for jr in (0..nc).step_by(NR) {
                    let nr = NR.min(nc - jr);
                    let bp = &bpack[jr * kc..jr * kc + kc * NR];
                    for ir in (0..mc).step_by(MR) {
                        let mr = MR.min(mc - ir);
                        let ap = &apack[ir * kc..ir * kc + kc * MR];
                        let c0 = (ic + ir) * n + jc + jr;
                        if mr == MR && nr == NR {
                            micro::<T, MR, NR>(kc, ap, bp, &mut c[c0..], n);
                        } else {
                            let mut tile = [[T::zero(); NR]; MR];
                            for (r, row) in tile.iter_mut().enumerate().take(mr) {
                                row[..nr].copy_from_slice(&c[c0 + r * n..c0 + r * n + nr]);
                            }
                            micro_tile::<T, MR, NR>(kc, ap, bp, &mut tile);
                            for (r, row) in tile.iter().enumerate().take(mr) {
                                c[c0 + r * n..c0 + r * n + nr].copy_from_slice(&row[..nr]);
                            }
                        }
                    }
                }
                ic += mc;
            }
            pc += kc;
        }
        jc += nc;
    }
}

/// Packs `b[pc..pc+kc, jc..jc+nc]` into column panels of width `NR`, zero padded.
#[inline(always)]
fn pack_b<T: Scalar, const NR: usize>(b: &MatRef<'_, T>, pc: usize, kc: usize, jc: usize, nc: usize, out: &mut [T]) {
    for jr in (0..nc).step_by(NR) {
        let nr = NR.min(nc - jr);
        let panel = &mut out[jr * kc..jr * kc + kc * NR];
        for l in 0..kc {
            let dst = &mut panel[l * NR..l * NR + NR];
            if b.col_stride == 1 {
                let base = (pc + l) * b.row_stride + jc + jr;
                dst[..nr].copy_from_slice(&b.data[base..base + nr]);
            } else {
                for (j, d) in dst.iter_mut().enumerate().take(nr) {
                    *d = b.at(pc + l, jc + jr + j);
                }
            }
            for d in dst.iter_mut().skip(nr) {
                *d = T::zero();
            }
        }
    }
}

/// Packs `a[ic..ic+mc, pc..pc+kc]` into row panels of height `MR`, zero padded.
#[inline(always)]
fn pack_a<T: Scalar, const MR: usize>(a: &MatRef<'_, T>, ic: usize, mc: usize, pc: usize, kc: usize, out: &mut [T]) {
    for ir in (0..mc).step_by(MR) {
        let mr = MR.min(mc - ir);
        let panel = &mut out[ir * kc..ir * kc + kc * MR];
        if a.row_stride == 1 {
            for l in 0..kc {
                let base = (pc + l) * a.col_stride + ic + ir;
                let dst = &mut panel[l * MR..l * MR + MR];
                dst[..mr].copy_from_slice(&a.data[base..base + mr]);
                dst[mr..].iter_mut().for_each(|d| *d = T::zero());
            }
        } else {
            for r in 0..MR {
                if r < mr {
                    let row = (ic + ir + r) * a.row_stride;
                    for l in 0..kc {
                        panel[l * MR + r] = a.data[row + (pc + l) * a.col_stride];
                    }
                } else {
                    for l in 0..kc {
                        panel[l * MR + r] = T::zero();
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro<T: Scalar, const MR: usize, const NR: usize>(kc: usize, ap: &[T], bp: &[T], c: &mut [T], ldc: usize) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[r * ldc..r * ldc + NR]);
    }
    micro_tile::<T, MR, NR>(kc, ap, bp, &mut acc);
    for (r, row) in acc.iter().enumerate() {
        c[r * ldc..r * ldc + NR].copy_from_slice(row);
    }
}

#[inline(always)]
fn micro_tile<T: Scalar, const MR: usize, const NR: usize>(kc: usize, ap: &[T], bp: &[T], acc: &mut [[T; NR]; MR]) {
    let ap = &ap[..kc * MR];
    let bp = &bp[..kc * NR];
    for (arow, brow) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for r in 0..MR {
            let av = arow[r];
            for j in 0..NR {
                acc[r][j] += av * brow[j];
            }
        }
    }
}
