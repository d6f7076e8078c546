//! Direct 2-D convolution kernels over `[c, h, w]` buffers.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad_w - self.kw) / self.stride + 1
    }
}

/// Output indices `o` in `[lo, hi)` with `0 <= o*stride + k - pad < n_in`.
fn valid_range(n_in: usize, n_out: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let (n_in, k, pad, s) = (n_in as i64, k as i64, pad as i64, stride as i64);
    let lo = (pad - k).max(0);
    let lo = (lo + s - 1) / s;
    let hi = (n_in - 1 + pad - k).div_euclid(s) + 1;
    let hi = hi.clamp(0, n_out as i64);
    (lo.min(hi) as usize, hi as usize)
}

pub(crate) fn forward(x: &[f64], weight: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let in_plane = s.in_h * s.in_w;
    let out_plane = oh * ow;
    let mut y = vec![0.0; s.out_ch * out_plane];
    for o in 0..s.out_ch {
        let out = &mut y[o * out_plane..(o + 1) * out_plane];
        out.fill(bias[o]);
        for i in 0..s.in_ch {
            let inp = &x[i * in_plane..(i + 1) * in_plane];
            for ky in 0..s.kh {
                let (oy0, oy1) = valid_range(s.in_h, oh, ky, s.pad_h, s.stride);
                for kx in 0..s.kw {
                    let wv = weight[((o * s.in_ch + i) * s.kh + ky) * s.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(s.in_w, ow, kx, s.pad_w, s.stride);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s.stride + ky - s.pad_h;
                        let in_row = &inp[iy * s.in_w..(iy + 1) * s.in_w];
                        let out_row = &mut out[oy * ow..(oy + 1) * ow];
                        if s.stride == 1 {
                            let base = ox0 + kx - s.pad_w;
                            for (dst, src) in out_row[ox0..ox1].iter_mut().zip(&in_row[base..base + (ox1 - ox0)]) {
                                *dst += wv * src;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * in_row[ox * s.stride + kx - s.pad_w];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)` for an upstream gradient `gy`.
pub(crate) fn backward(gy: &[f64], x: &[f64], weight: &[f64], s: &ConvShape) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let in_plane = s.in_h * s.in_w;
    let out_plane = oh * ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; s.out_ch];
    for o in 0..s.out_ch {
        let g = &gy[o * out_plane..(o + 1) * out_plane];
        db[o] = g.iter().sum();
        for i in 0..s.in_ch {
            let inp = &x[i * in_plane..(i + 1) * in_plane];
            let dinp = &mut dx[i * in_plane..(i + 1) * in_plane];
            for ky in 0..s.kh {
                let (oy0, oy1) = valid_range(s.in_h, oh, ky, s.pad_h, s.stride);
                for kx in 0..s.kw {
                    let widx = ((o * s.in_ch + i) * s.kh + ky) * s.kw + kx;
                    let wv = weight[widx];
                    let (ox0, ox1) = valid_range(s.in_w, ow, kx, s.pad_w, s.stride);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s.stride + ky - s.pad_h;
                        for ox in ox0..ox1 {
                            let ix = ox * s.stride + kx - s.pad_w;
                            let gv = g[oy * ow + ox];
                            acc += gv * inp[iy * s.in_w + ix];
                            dinp[iy * s.in_w + ix] += wv * gv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}
