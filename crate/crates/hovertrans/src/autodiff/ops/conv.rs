//! Convolution and pooling ops (NHWC layout, im2col-backed).

use ndarray::{Array2, Array4, ArrayD, Axis, Ix4};

use crate::autodiff::{as1, as2, reshaped, BackwardFn, Graph, NodeId};

/// Kernel geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output spatial side for a square input under `spec` (floor convention).
pub fn conv2d_output_side(side: usize, spec: Conv2dSpec) -> usize {
    (side + 2 * spec.pad - spec.kernel) / spec.stride + 1
}

fn im2col(x: &ArrayD<f64>, spec: Conv2dSpec) -> (Array2<f64>, [usize; 4]) {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, h, w, ci) = xv.dim();
    let ho = (h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
    let wo = (w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
    let k = spec.kernel;
    let xs = xv.as_slice().expect("standard layout");
    let mut col = Array2::<f64>::zeros((b * ho * wo, k * k * ci));
    let cs = col.as_slice_mut().unwrap();
    let mut out_row = 0;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = out_row * k * k * ci;
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let dst = base + (ky * k + kx) * ci;
                        cs[dst..dst + ci].copy_from_slice(&xs[src..src + ci]);
                    }
                }
                out_row += 1;
            }
        }
    }
    (col, [b, ho, wo, ci])
}

fn col2im(dcol: &Array2<f64>, dims: [usize; 4], h: usize, w: usize, spec: Conv2dSpec) -> Array4<f64> {
    let [b, ho, wo, ci] = dims;
    let k = spec.kernel;
    let mut dx = Array4::<f64>::zeros((b, h, w, ci));
    let ds = dcol.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    let mut row = 0;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = row * k * k * ci;
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let src = base + (ky * k + kx) * ci;
                        for c in 0..ci {
                            xs[dst + c] += ds[src + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

impl Graph {
    /// 2-D convolution: `x (B,H,W,Ci)` with kernel `w (k,k,Ci,Co)` and bias
    /// `b (Co)`. The im2col matrix is recomputed in the backward pass rather
    /// than saved, trading a little time for memory.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv2dSpec) -> NodeId {
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 4, "conv kernel rank");
        assert_eq!(wshape[0], spec.kernel);
        assert_eq!(wshape[1], spec.kernel);
        let (ci, co) = (wshape[2], wshape[3]);
        assert_eq!(self.shape(x)[3], ci, "conv input channels");
        assert_eq!(self.shape(b), [co], "conv bias dim");
        let (h, win) = (self.shape(x)[1], self.shape(x)[2]);
        let (col, dims) = im2col(&self.values[x], spec);
        let [batch, ho, wo, _] = dims;
        let wmat = self.values[w]
            .view()
            .into_shape_with_order((spec.kernel * spec.kernel * ci, co))
            .unwrap();
        let mut y = col.dot(&wmat);
        y += &as1(&self.values[b]);
        let back: BackwardFn = Box::new(move |vals, g| {
            let g2 = g
                .view()
                .into_shape_with_order((batch * ho * wo, co))
                .unwrap();
            let (col, dims) = im2col(&vals[x], spec);
            let wmat = vals[w]
                .view()
                .into_shape_with_order((spec.kernel * spec.kernel * ci, co))
                .unwrap();
            let dw = col.t().dot(&g2);
            let db = g2.sum_axis(Axis(0));
            let dcol = g2.dot(&wmat.t());
            let dx = col2im(&dcol, dims, h, win, spec);
            vec![
                (x, dx.into_dyn()),
                (w, reshaped(dw.into_dyn(), &[spec.kernel, spec.kernel, ci, co])),
                (b, db.into_dyn()),
            ]
        });
        self.push(
            reshaped(y.into_dyn(), &[batch, ho, wo, co]),
            Some(back),
            None,
        )
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.values[x].view().into_dimensionality::<Ix4>().unwrap();
        let (b, h, w, c) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let mut y = Array4::<f64>::zeros((b, h / 2, w / 2, c));
        for bi in 0..b {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    for ch in 0..c {
                        y[(bi, oy, ox, ch)] = 0.25
                            * (xv[(bi, 2 * oy, 2 * ox, ch)]
                                + xv[(bi, 2 * oy, 2 * ox + 1, ch)]
                                + xv[(bi, 2 * oy + 1, 2 * ox, ch)]
                                + xv[(bi, 2 * oy + 1, 2 * ox + 1, ch)]);
                    }
                }
            }
        }
        let back: BackwardFn = Box::new(move |_, g| {
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = Array4::<f64>::zeros((b, h, w, c));
            for bi in 0..b {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        for ch in 0..c {
                            let share = 0.25 * gv[(bi, oy, ox, ch)];
                            dx[(bi, 2 * oy, 2 * ox, ch)] += share;
                            dx[(bi, 2 * oy, 2 * ox + 1, ch)] += share;
                            dx[(bi, 2 * oy + 1, 2 * ox, ch)] += share;
                            dx[(bi, 2 * oy + 1, 2 * ox + 1, ch)] += share;
                        }
                    }
                }
            }
            vec![(x, dx.into_dyn())]
        });
        self.push(y.into_dyn(), Some(back), None)
    }

    /// Mean over the spatial axes: `(B,H,W,C) -> (B,C)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.values[x].view().into_dimensionality::<Ix4>().unwrap();
        let (b, h, w, c) = xv.dim();
        let n = (h * w) as f64;
        let mut y = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        y[(bi, ch)] += xv[(bi, yy, xx, ch)];
                    }
                }
            }
        }
        y /= n;
        let back: BackwardFn = Box::new(move |_, g| {
            let gv = as2(g);
            let mut dx = Array4::<f64>::zeros((b, h, w, c));
            for bi in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            dx[(bi, yy, xx, ch)] = gv[(bi, ch)] / n;
                        }
                    }
                }
            }
            vec![(x, dx.into_dyn())]
        });
        self.push(y.into_dyn(), Some(back), None)
    }
}
