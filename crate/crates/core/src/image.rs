//! Interleaved `f32` images and the resampling kernels shared by the data,
//! view and probe code.

/// Row-major height x width x channels image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Integer pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    /// The rectangle mirrored horizontally inside an image of `width`.
    pub fn mirrored(self, width: usize) -> Rect {
        Rect {
            x: width - self.x - self.w,
            ..self
        }
    }
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image buffer size");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn crop(&self, r: Rect) -> Image {
        assert!(r.x + r.w <= self.width && r.y + r.h <= self.height, "crop out of bounds");
        let mut out = Image::zeros(r.h, r.w, self.channels);
        for y in 0..r.h {
            let src = ((r.y + y) * self.width + r.x) * self.channels;
            let dst = y * r.w * self.channels;
            out.data[dst..dst + r.w * self.channels]
                .copy_from_slice(&self.data[src..src + r.w * self.channels]);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let s = (y * self.width + (self.width - 1 - x)) * self.channels;
                let d = (y * self.width + x) * self.channels;
                out.data[d..d + self.channels].copy_from_slice(&self.data[s..s + self.channels]);
            }
        }
        out
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        let wy = bilinear_taps(self.height, out_h);
        let wx = bilinear_taps(self.width, out_w);
        let c = self.channels;
        let mut out = Image::zeros(out_h, out_w, c);
        for (oy, &(y0, y1, ty)) in wy.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in wx.iter().enumerate() {
                for ch in 0..c {
                    let top = self.at(y0, x0, ch) as f64 * (1.0 - tx) + self.at(y0, x1, ch) as f64 * tx;
                    let bot = self.at(y1, x0, ch) as f64 * (1.0 - tx) + self.at(y1, x1, ch) as f64 * tx;
                    out.set(oy, ox, ch, (top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        out
    }

    /// Nearest-neighbour resize whose index map is mirror-symmetric, so
    /// resizing commutes exactly with a horizontal flip.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Image {
        let my = nearest_map(self.height, out_h);
        let mx = nearest_map(self.width, out_w);
        let c = self.channels;
        let mut out = Image::zeros(out_h, out_w, c);
        for (oy, &sy) in my.iter().enumerate() {
            for (ox, &sx) in mx.iter().enumerate() {
                for ch in 0..c {
                    out.set(oy, ox, ch, self.at(sy, sx, ch));
                }
            }
        }
        out
    }

    /// Area pooling to `out_h x out_w`. With `ignore_zeros`, zero pixels
    /// (no return) are excluded from each cell's mean and an all-zero cell
    /// stays zero.
    pub fn pool_area(&self, out_h: usize, out_w: usize, ignore_zeros: bool) -> Image {
        let ry = cell_ranges(self.height, out_h);
        let rx = cell_ranges(self.width, out_w);
        let c = self.channels;
        let mut out = Image::zeros(out_h, out_w, c);
        for (oy, &(y0, y1)) in ry.iter().enumerate() {
            for (ox, &(x0, x1)) in rx.iter().enumerate() {
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    let mut n = 0usize;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = self.at(y, x, ch);
                            if ignore_zeros && v == 0.0 {
                                continue;
                            }
                            sum += v as f64;
                            n += 1;
                        }
                    }
                    let v = if n == 0 { 0.0 } else { (sum / n as f64) as f32 };
                    out.set(oy, ox, ch, v);
                }
            }
        }
        out
    }
}

/// For each output index, `(i0, i1, t)` so the bilinear sample is
/// `(1 - t) * src[i0] + t * src[i1]` (half-pixel centers, clamped).
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Dense `(dst*dst) x (src*src)` bilinear interpolation matrix for square
/// grids, row-major. Rows sum to one.
pub fn bilinear_matrix(src_side: usize, dst_side: usize) -> Vec<f64> {
    let taps = bilinear_taps(src_side, dst_side);
    let n_in = src_side * src_side;
    let mut m = vec![0.0; dst_side * dst_side * n_in];
    for (oy, &(y0, y1, ty)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in taps.iter().enumerate() {
            let row = &mut m[(oy * dst_side + ox) * n_in..(oy * dst_side + ox + 1) * n_in];
            row[y0 * src_side + x0] += (1.0 - ty) * (1.0 - tx);
            row[y0 * src_side + x1] += (1.0 - ty) * tx;
            row[y1 * src_side + x0] += ty * (1.0 - tx);
            row[y1 * src_side + x1] += ty * tx;
        }
    }
    m
}

fn nearest_map(src: usize, dst: usize) -> Vec<usize> {
    let pick = |o: usize| ((2 * o + 1) * src) / (2 * dst);
    (0..dst)
        .map(|o| {
            if 2 * o < dst {
                pick(o)
            } else {
                src - 1 - pick(dst - 1 - o)
            }
        })
        .collect()
}

/// Integer source range `[lo, hi)` covered by each output cell.
fn cell_ranges(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|o| {
            let lo = (o * src) / dst;
            let hi = ((o + 1) * src).div_ceil(dst).max(lo + 1);
            (lo, hi.min(src))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_resize_commutes_with_flip() {
        let mut img = Image::zeros(7, 13, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        for (h, w) in [(4, 6), (8, 32), (10, 10), (3, 5)] {
            let a = img.flip_horizontal().resize_nearest(h, w);
            let b = img.resize_nearest(h, w).flip_horizontal();
            assert_eq!(a, b, "{h}x{w}");
        }
    }

    #[test]
    fn zero_ignoring_pool() {
        let img = Image::from_vec(2, 2, 1, vec![0.0, 0.0, 0.5, 0.5]);
        assert_eq!(img.pool_area(1, 1, true).data, vec![0.5]);
        assert_eq!(img.pool_area(1, 1, false).data, vec![0.25]);
        let z = Image::zeros(2, 2, 1);
        assert_eq!(z.pool_area(1, 1, true).data, vec![0.0]);
    }

    #[test]
    fn pool_commutes_with_flip() {
        let mut img = Image::zeros(9, 11, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = if i % 3 == 0 { 0.0 } else { i as f32 };
        }
        for (h, w) in [(4, 4), (16, 16), (5, 7)] {
            assert_eq!(
                img.flip_horizontal().pool_area(h, w, true),
                img.pool_area(h, w, true).flip_horizontal()
            );
        }
    }

    #[test]
    fn bilinear_matrix_rows_are_convex() {
        let m = bilinear_matrix(4, 2);
        for row in m.chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let id = bilinear_matrix(3, 3);
        for (i, row) in id.chunks(9).enumerate() {
            assert_eq!(row[i], 1.0);
        }
    }
}
