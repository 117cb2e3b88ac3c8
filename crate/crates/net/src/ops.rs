//! Custom autograd ops where composing stock tensor ops is too slow on CPU.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.padding - self.k) / self.stride + 1;
        let wo = (self.w + 2 * self.padding - self.k) / self.stride + 1;
        (ho, wo)
    }

    /// Calls `f(col_start, img_start, len)` for every run of in-bounds taps:
    /// `len` consecutive columns reading image elements `stride` apart.
    fn segments(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out();
        let (s, p) = (self.stride, self.padding);
        let n = self.b * ho * wo;
        for ci in 0..self.c {
            for dy in 0..self.k {
                for dx in 0..self.k {
                    let row = (ci * self.k + dy) * self.k + dx;
                    // in-bounds output columns: 0 <= j*s + dx - p < w
                    let j0 = p.saturating_sub(dx).div_ceil(s).min(wo);
                    let j1 = (self.w + p).saturating_sub(dx).div_ceil(s).clamp(j0, wo);
                    if j0 == j1 {
                        continue;
                    }
                    for bi in 0..self.b {
                        let plane = (bi * self.c + ci) * self.h * self.w;
                        for i in 0..ho {
                            let y = (i * s + dy) as isize - p as isize;
                            if y >= 0 && y < self.h as isize {
                                let col = row * n + (bi * ho + i) * wo + j0;
                                f(col, plane + y as usize * self.w + j0 * s + dx - p, j1 - j0);
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather<T: Copy + Default>(&self, img: &[T]) -> Vec<T> {
        let (ho, wo) = self.out();
        let mut cols = vec![T::default(); self.c * self.k * self.k * self.b * ho * wo];
        let s = self.stride;
        self.segments(|c, x, len| {
            if s == 1 {
                cols[c..c + len].copy_from_slice(&img[x..x + len]);
            } else {
                for t in 0..len {
                    cols[c + t] = img[x + t * s];
                }
            }
        });
        cols
    }

    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut img = vec![T::default(); self.b * self.c * self.h * self.w];
        let s = self.stride;
        self.segments(|c, x, len| {
            for t in 0..len {
                img[x + t * s] += cols[c + t];
            }
        });
        img
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

/// `[B, C, H, W]` → `[C*k*k, B*Ho*Wo]` patch matrix with zero padding.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatter-adds patch columns back onto the image.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (ho, wo) = g.out();
        let shape = Shape::from((g.c * g.k * g.k, g.b * ho * wo));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.gather(contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(g.gather(contiguous(d, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.scatter(contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(g.scatter(contiguous(d, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Patch matrix `[C*k*k, B*Ho*Wo]` of `x: [B, C, H, W]`; rows ordered
/// `(channel, dy, dx)`, columns `(batch, row, col)`.
pub fn im2col(x: &Tensor, k: usize, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.contiguous()?.apply_op1(Im2Col(Geometry { b, c, h, w, k, stride, padding }))
}
