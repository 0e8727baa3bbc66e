//! Spatial resampling: nearest/bilinear upsampling, aligned cropping, and
//! RoI feature cropping.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// 2x nearest-neighbor upsampling: every value becomes a 2x2 block.
pub fn upsample2_nearest<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..os.h {
                let src = s.index(n, c, h / 2, 0);
                let dst = os.index(n, c, h, 0);
                for w in 0..os.w {
                    out.data_mut()[dst + w] = x.data()[src + w / 2];
                }
            }
        }
    }
    out
}

/// Each input cell collects the gradient of its 2x2 output block.
pub fn upsample2_nearest_backward<T: Scalar>(x_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape);
    let os = grad_out.shape();
    for n in 0..x_shape.n {
        for c in 0..x_shape.c {
            for h in 0..os.h {
                for w in 0..os.w {
                    let i = x_shape.index(n, c, h / 2, w / 2);
                    gx.data_mut()[i] += grad_out.at(n, c, h, w);
                }
            }
        }
    }
    gx
}

/// Keep the top-left `h` x `w` region: x[:, :, 0:h, 0:w].
pub fn crop_to<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h > s.h || w > s.w {
        return Err(Error::InvalidArgument {
            op: "crop_to",
            msg: format!("crop {}x{} exceeds input {}x{}", h, w, s.h, s.w),
        });
    }
    let os = Shape::new(s.n, s.c, h, w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                let src = s.index(n, c, y, 0);
                let dst = os.index(n, c, y, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// Gradient scatters into the top-left region; the cropped-away border gets zero.
pub fn crop_to_backward<T: Scalar>(x_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape);
    let gs = grad_out.shape();
    for n in 0..gs.n {
        for c in 0..gs.c {
            for y in 0..gs.h {
                let dst = x_shape.index(n, c, y, 0);
                let src = gs.index(n, c, y, 0);
                gx.data_mut()[dst..dst + gs.w].copy_from_slice(&grad_out.data()[src..src + gs.w]);
            }
        }
    }
    gx
}

/// Axis-aligned box in input-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> RoiBox {
        RoiBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

struct BilinearTap {
    // up to 4 (flat_offset_within_plane, weight) pairs
    taps: [(usize, f64); 4],
    count: usize,
}

/// One bilinear sample at feature coordinates (fy, fx). Pixel centers sit at
/// integer coordinates; out-of-bounds corners read as zero.
fn bilinear_taps(h: usize, w: usize, fy: f64, fx: f64) -> BilinearTap {
    let y0 = fy.floor();
    let x0 = fx.floor();
    let dy = fy - y0;
    let dx = fx - x0;
    let mut t = BilinearTap {
        taps: [(0, 0.0); 4],
        count: 0,
    };
    let corners = [
        (y0 as isize, x0 as isize, (1.0 - dy) * (1.0 - dx)),
        (y0 as isize, x0 as isize + 1, (1.0 - dy) * dx),
        (y0 as isize + 1, x0 as isize, dy * (1.0 - dx)),
        (y0 as isize + 1, x0 as isize + 1, dy * dx),
    ];
    for (cy, cx, wgt) in corners {
        if wgt != 0.0 && cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
            t.taps[t.count] = ((cy as usize) * w + cx as usize, wgt);
            t.count += 1;
        }
    }
    t
}

/// Per-bin sample coordinates for a RoI crop: one bilinear sample at each
/// bin center, in feature-map coordinates (image coords divided by stride).
fn roi_bin_coords(b: RoiBox, stride: usize, out_h: usize, out_w: usize, bin: (usize, usize)) -> (f64, f64) {
    let s = stride as f64;
    let (i, j) = bin;
    let fy = b.y0 / s + (i as f64 + 0.5) * (b.height() / s) / out_h as f64 - 0.5;
    let fx = b.x0 / s + (j as f64 + 0.5) * (b.width() / s) / out_w as f64 - 0.5;
    (fy, fx)
}

/// Bilinear RoI crop of a single-sample feature map `f` at `stride` relative
/// to the image. Output is (1, C, out_h, out_w).
pub fn roi_align<T: Scalar>(
    f: &Tensor<T>,
    b: RoiBox,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.n != 1 {
        return Err(Error::InvalidArgument {
            op: "roi_align",
            msg: format!("expects a single-sample feature map, got N={}", s.n),
        });
    }
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "roi_align",
            msg: format!("degenerate box {:?}", b),
        });
    }
    let os = Shape::new(1, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for i in 0..out_h {
        for j in 0..out_w {
            let (fy, fx) = roi_bin_coords(b, stride, out_h, out_w, (i, j));
            let taps = bilinear_taps(s.h, s.w, fy, fx);
            for c in 0..s.c {
                let plane = s.index(0, c, 0, 0);
                let mut acc = T::zero();
                for t in 0..taps.count {
                    let (off, wgt) = taps.taps[t];
                    acc += f.data()[plane + off] * T::from_f64(wgt);
                }
                out.set(0, c, i, j, acc);
            }
        }
    }
    Ok(out)
}

/// Scatter the crop gradient back through the bilinear taps.
pub fn roi_align_backward<T: Scalar>(
    f_shape: Shape,
    b: RoiBox,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let gs = grad_out.shape();
    let mut gf = Tensor::zeros(f_shape);
    for i in 0..gs.h {
        for j in 0..gs.w {
            let (fy, fx) = roi_bin_coords(b, stride, gs.h, gs.w, (i, j));
            let taps = bilinear_taps(f_shape.h, f_shape.w, fy, fx);
            for c in 0..gs.c {
                let g = grad_out.at(0, c, i, j);
                let plane = f_shape.index(0, c, 0, 0);
                for t in 0..taps.count {
                    let (off, wgt) = taps.taps[t];
                    gf.data_mut()[plane + off] += g * T::from_f64(wgt);
                }
            }
        }
    }
    gf
}

/// Bilinear resize with the half-pixel convention and edge clamping; used
/// for attention-map upsampling and the bilinear basis-upsampling mode.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    let sy = s.h as f64 / out_h as f64;
    let sx = s.w as f64 / out_w as f64;
    for i in 0..out_h {
        for j in 0..out_w {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (s.h - 1) as f64);
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (s.w - 1) as f64);
            let taps = bilinear_taps(s.h, s.w, fy, fx);
            for n in 0..s.n {
                for c in 0..s.c {
                    let plane = s.index(n, c, 0, 0);
                    let mut acc = T::zero();
                    for t in 0..taps.count {
                        let (off, wgt) = taps.taps[t];
                        acc += x.data()[plane + off] * T::from_f64(wgt);
                    }
                    out.set(n, c, i, j, acc);
                }
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Scalar>(x_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let gs = grad_out.shape();
    let mut gx = Tensor::zeros(x_shape);
    let sy = x_shape.h as f64 / gs.h as f64;
    let sx = x_shape.w as f64 / gs.w as f64;
    for i in 0..gs.h {
        for j in 0..gs.w {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (x_shape.h - 1) as f64);
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (x_shape.w - 1) as f64);
            let taps = bilinear_taps(x_shape.h, x_shape.w, fy, fx);
            for n in 0..gs.n {
                for c in 0..gs.c {
                    let g = grad_out.at(n, c, i, j);
                    let plane = x_shape.index(n, c, 0, 0);
                    for t in 0..taps.count {
                        let (off, wgt) = taps.taps[t];
                        gx.data_mut()[plane + off] += g * T::from_f64(wgt);
                    }
                }
            }
        }
    }
    gx
}
