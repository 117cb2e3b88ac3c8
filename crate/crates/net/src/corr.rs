//! All-pairs correlation pyramid and windowed bilinear lookup.

use candle_core::{DType, Tensor};

use crate::NetError;

/// Correlation between every 1/8-resolution location of frame A and every
/// location of frame B, average-pooled over frame B's axes into levels.
pub struct CorrPyramid {
    /// Level `l`: `[B*h*w, h_l*w_l]`.
    levels: Vec<Tensor>,
    sizes: Vec<(usize, usize)>,
    batch: usize,
    height: usize,
    width: usize,
}

impl CorrPyramid {
    /// `f1`, `f2`: `[B, D, h, w]`. Dot products are scaled by `1/sqrt(D)`.
    pub fn new(f1: &Tensor, f2: &Tensor, levels: usize) -> Result<Self, NetError> {
        let (b, d, h, w) = f1.dims4()?;
        if f2.dims4()? != (b, d, h, w) {
            return Err(NetError::ShapeMismatch(format!("feature maps {:?} vs {:?}", f1.dims(), f2.dims())));
        }
        if h >> (levels - 1) == 0 || w >> (levels - 1) == 0 {
            return Err(NetError::ShapeMismatch(format!("{h}x{w} feature grid too small for {levels} pyramid levels")));
        }
        let a = f1.reshape((b, d, h * w))?.transpose(1, 2)?;
        let c = f2.reshape((b, d, h * w))?;
        let corr = (a.matmul(&c)? / (d as f64).sqrt())?.reshape((b * h * w, 1, h, w))?;
        let mut maps = vec![corr];
        let mut sizes = vec![(h, w)];
        for l in 1..levels {
            let next = maps[l - 1].avg_pool2d(2)?;
            sizes.push((next.dim(2)?, next.dim(3)?));
            maps.push(next);
        }
        let levels = maps
            .into_iter()
            .zip(&sizes)
            .map(|(m, &(hl, wl))| m.reshape((b * h * w, hl * wl)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { levels, sizes, batch: b, height: h, width: w })
    }

    /// Same values with the autograd history dropped.
    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.detach()).collect(),
            sizes: self.sizes.clone(),
            batch: self.batch,
            height: self.height,
            width: self.width,
        }
    }

    /// `(h_l, w_l)` of every level.
    pub fn level_sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    /// Level `l` as `[B*h*w, h_l, w_l]`.
    pub fn level(&self, l: usize) -> Result<Tensor, NetError> {
        let (hl, wl) = self.sizes[l];
        Ok(self.levels[l].reshape((self.levels[l].dim(0)?, hl, wl))?)
    }

    /// Channels per location returned by [`CorrPyramid::lookup`].
    pub fn channels(&self, radius: usize) -> usize {
        self.levels.len() * (2 * radius + 1).pow(2)
    }

    /// Samples a `(2r+1)^2` window (row-major in `(dy, dx)`) around each target
    /// position on every level; out-of-range taps read zero.
    ///
    /// `coords`: `[B, 2, h, w]` absolute target positions `(x, y)` in level-0
    /// pixels. Gradients flow to `coords` through the bilinear weights.
    pub fn lookup(&self, coords: &Tensor, radius: usize) -> Result<Tensor, NetError> {
        let (b, two, h, w) = coords.dims4()?;
        if (b, two, h, w) != (self.batch, 2, self.height, self.width) {
            return Err(NetError::ShapeMismatch(format!(
                "coords {:?} for a {}x{}x{} pyramid",
                coords.dims(),
                self.batch,
                self.height,
                self.width
            )));
        }
        let n = b * h * w;
        let dev = coords.device();
        let dtype = coords.dtype();
        let pts = coords.permute((0, 2, 3, 1))?.reshape((n, 2))?;
        let host: Vec<Vec<f64>> = pts.to_dtype(DType::F64)?.to_vec2()?;
        let side = 2 * radius + 1;
        let p = side * side;
        let r = radius as i64;

        let mut out = Vec::with_capacity(self.levels.len());
        for (l, (corr, &(hl, wl))) in self.levels.iter().zip(&self.sizes).enumerate() {
            let scale = 1.0 / (1u64 << l) as f64;
            let scaled = (&pts * scale)?;
            let mut fx = Vec::with_capacity(n);
            let mut fy = Vec::with_capacity(n);
            let mut idx = vec![vec![0u32; n * p]; 4];
            let mut mask = vec![vec![0f64; n * p]; 4];
            for (i, xy) in host.iter().enumerate() {
                let (x0, y0) = ((xy[0] * scale).floor(), (xy[1] * scale).floor());
                fx.push(x0);
                fy.push(y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let k = i * p + ((dy + r) as usize) * side + (dx + r) as usize;
                        for (c, (oy, ox)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let (yy, xx) = (y0 + dy + oy, x0 + dx + ox);
                            if yy >= 0 && xx >= 0 && (yy as usize) < hl && (xx as usize) < wl {
                                idx[c][k] = (yy as usize * wl + xx as usize) as u32;
                                mask[c][k] = 1.0;
                            }
                        }
                    }
                }
            }
            let floor_x = Tensor::from_vec(fx, (n, 1), dev)?.to_dtype(dtype)?;
            let floor_y = Tensor::from_vec(fy, (n, 1), dev)?.to_dtype(dtype)?;
            let wx = scaled.narrow(1, 0, 1)?.sub(&floor_x)?;
            let wy = scaled.narrow(1, 1, 1)?.sub(&floor_y)?;
            let (ux, uy) = ((1.0 - &wx)?, (1.0 - &wy)?);
            let weights = [(&uy * &ux)?, (&uy * &wx)?, (&wy * &ux)?, (&wy * &wx)?];
            let mut acc: Option<Tensor> = None;
            for c in 0..4 {
                let ix = Tensor::from_vec(std::mem::take(&mut idx[c]), (n, p), dev)?;
                let m = Tensor::from_vec(std::mem::take(&mut mask[c]), (n, p), dev)?.to_dtype(dtype)?;
                let tap = corr.gather(&ix, 1)?.mul(&m)?.broadcast_mul(&weights[c])?;
                acc = Some(match acc {
                    Some(a) => (a + tap)?,
                    None => tap,
                });
            }
            out.push(acc.expect("four corners"));
        }
        let all = Tensor::cat(&out, 1)?;
        let c = all.dim(1)?;
        Ok(all.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// `[B, 2, h, w]` pixel-index grid `(x, y)`.
pub fn coords_grid(b: usize, h: usize, w: usize, like: &Tensor) -> Result<Tensor, NetError> {
    let mut data = Vec::with_capacity(b * 2 * h * w);
    for _ in 0..b {
        data.extend((0..h * w).map(|i| (i % w) as f64));
        data.extend((0..h * w).map(|i| (i / w) as f64));
    }
    Ok(Tensor::from_vec(data, (b, 2, h, w), like.device())?.to_dtype(like.dtype())?)
}
