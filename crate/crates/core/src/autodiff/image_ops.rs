//! Spatial ops on C×H×W tensors: convolution, upsampling, and differentiable
//! bilinear point sampling.
//!
//! Sampling convention everywhere: a normalized coordinate p in [0,1] maps to
//! the continuous pixel coordinate u = p·S − 0.5 for an axis of size S, so the
//! center of cell i sits at p = (i + 0.5)/S and sampling there is exact.
//! Out-of-range corners are clamped to the border (replicate padding).

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};

use super::tensor::{Elem, Tensor};

/// 2-D convolution of a C×H×W tensor with an OC×IC×K×K kernel, via im2col.
pub fn conv2d<F: Elem>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("conv2d input not 3-D");
    let (ci, h, wd) = xv.dim();
    let ws = w.shape().to_vec();
    assert_eq!(ws.len(), 4, "conv2d weight not 4-D");
    let (co, wci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
    assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;

    let cols = im2col(&xv.to_owned(), k, stride, pad, ho, wo);
    let wmat = w
        .value()
        .clone()
        .into_shape_with_order((co, ci * k * k))
        .unwrap();
    let mut y = wmat.dot(&cols); // co × (ho·wo)
    let bv = b.value().view().into_dimensionality::<ndarray::Ix1>().unwrap();
    for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let value = y.into_shape_with_order((co, ho, wo)).unwrap().into_dyn();

    let wmat_b = wmat;
    Tensor::op(
        value,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let gmat = g3.to_owned().into_shape_with_order((co, ho * wo)).unwrap();
            let gw = gmat.dot(&cols.t());
            let gb = gmat.sum_axis(ndarray::Axis(1));
            let gcols = wmat_b.t().dot(&gmat);
            let gx = col2im::<F>(&gcols, ci, h, wd, k, stride, pad, ho, wo);
            vec![
                gx.into_dyn(),
                gw.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(vec![co, ci, k, k])
                    .unwrap()
                    .into_dyn(),
                gb.into_dyn(),
            ]
        }),
    )
}

fn im2col<F: Elem>(
    x: &Array3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (ci, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((ci * k * k, ho * wo));
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oh in 0..ho {
                    let ih = oh * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for ow in 0..wo {
                        let iw = ow * stride + kj;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        cols[(row, oh * wo + ow)] = x[(c, ih, iw - pad)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Elem>(
    gcols: &Array2<F>,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<F> {
    let mut gx = Array3::<F>::zeros((ci, h, w));
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oh in 0..ho {
                    let ih = oh * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for ow in 0..wo {
                        let iw = ow * stride + kj;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        gx[(c, ih, iw - pad)] = gx[(c, ih, iw - pad)] + gcols[(row, oh * wo + ow)];
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor ×2 upsampling of a C×H×W tensor.
pub fn upsample_nearest2<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix3>().expect("upsample input not 3-D");
    let (c, h, w) = xv.dim();
    let mut y = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = xv[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    Tensor::op(
        y.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = Array3::<F>::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        gx[(ci, i, j)] = g3[(ci, 2 * i, 2 * j)]
                            + g3[(ci, 2 * i, 2 * j + 1)]
                            + g3[(ci, 2 * i + 1, 2 * j)]
                            + g3[(ci, 2 * i + 1, 2 * j + 1)];
                    }
                }
            }
            vec![gx.into_dyn()]
        }),
    )
}

/// Bilinearly samples a C×H×W map at P normalized (x, y) points, producing a
/// P×C tensor. Differentiable in both the map and the point coordinates.
pub fn bilinear_sample<F: Elem>(map: &Tensor<F>, points: &Tensor<F>) -> Tensor<F> {
    let m = map.value().view().into_dimensionality::<Ix3>().expect("bilinear map not 3-D");
    let p = points.value().view().into_dimensionality::<Ix2>().expect("bilinear points not 2-D");
    assert_eq!(p.ncols(), 2, "points must be P×2 (x, y)");
    let (c, h, w) = m.dim();
    let np = p.nrows();
    let (hf, wf) = (F::c(h as f64), F::c(w as f64));

    // Per-point corner indices and weights, reused in backward.
    let mut corners: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(np);
    let mut weights: Vec<(F, F)> = Vec::with_capacity(np); // (wx, wy)
    let mut out = Array2::<F>::zeros((np, c));
    let half = F::c(0.5);
    for i in 0..np {
        let u = p[(i, 0)] * wf - half;
        let v = p[(i, 1)] * hf - half;
        let x0 = u.floor();
        let y0 = v.floor();
        let wx = u - x0;
        let wy = v - y0;
        let clampi = |t: F, hi: usize| -> usize {
            let t = t.max(F::zero()).min(F::c(hi as f64 - 1.0));
            t.f64() as usize
        };
        let x0c = clampi(x0, w);
        let x1c = clampi(x0 + F::one(), w);
        let y0c = clampi(y0, h);
        let y1c = clampi(y0 + F::one(), h);
        corners.push((x0c, x1c, y0c, y1c));
        weights.push((wx, wy));
        for ch in 0..c {
            let v00 = m[(ch, y0c, x0c)];
            let v10 = m[(ch, y0c, x1c)];
            let v01 = m[(ch, y1c, x0c)];
            let v11 = m[(ch, y1c, x1c)];
            out[(i, ch)] = (F::one() - wx) * (F::one() - wy) * v00
                + wx * (F::one() - wy) * v10
                + (F::one() - wx) * wy * v01
                + wx * wy * v11;
        }
    }

    let mv = m.to_owned();
    Tensor::op(
        out.into_dyn(),
        vec![map.clone(), points.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gmap = Array3::<F>::zeros((c, h, w));
            let mut gpts = Array2::<F>::zeros((np, 2));
            for i in 0..np {
                let (x0c, x1c, y0c, y1c) = corners[i];
                let (wx, wy) = weights[i];
                let mut du = F::zero();
                let mut dv = F::zero();
                for ch in 0..c {
                    let go = g2[(i, ch)];
                    gmap[(ch, y0c, x0c)] =
                        gmap[(ch, y0c, x0c)] + go * (F::one() - wx) * (F::one() - wy);
                    gmap[(ch, y0c, x1c)] = gmap[(ch, y0c, x1c)] + go * wx * (F::one() - wy);
                    gmap[(ch, y1c, x0c)] = gmap[(ch, y1c, x0c)] + go * (F::one() - wx) * wy;
                    gmap[(ch, y1c, x1c)] = gmap[(ch, y1c, x1c)] + go * wx * wy;
                    let v00 = mv[(ch, y0c, x0c)];
                    let v10 = mv[(ch, y0c, x1c)];
                    let v01 = mv[(ch, y1c, x0c)];
                    let v11 = mv[(ch, y1c, x1c)];
                    du = du + go * ((v10 - v00) * (F::one() - wy) + (v11 - v01) * wy);
                    dv = dv + go * ((v01 - v00) * (F::one() - wx) + (v11 - v10) * wx);
                }
                gpts[(i, 0)] = du * wf;
                gpts[(i, 1)] = dv * hf;
            }
            vec![gmap.into_dyn(), gpts.into_dyn()]
        }),
    )
}

/// Plain-array bilinear resize of a 2-D map (no gradients), cell-center
/// aligned with border clamping, matching [`bilinear_sample`].
pub fn resize_bilinear<F: Elem>(src: &Array2<F>, ho: usize, wo: usize) -> Array2<F> {
    let (h, w) = src.dim();
    let mut out = Array2::<F>::zeros((ho, wo));
    for i in 0..ho {
        let py = (i as f64 + 0.5) / ho as f64;
        let v = py * h as f64 - 0.5;
        let y0 = v.floor();
        let wy = F::c(v - y0);
        let y0c = (y0.max(0.0) as usize).min(h - 1);
        let y1c = ((y0 + 1.0).max(0.0) as usize).min(h - 1);
        for j in 0..wo {
            let px = (j as f64 + 0.5) / wo as f64;
            let u = px * w as f64 - 0.5;
            let x0 = u.floor();
            let wx = F::c(u - x0);
            let x0c = (x0.max(0.0) as usize).min(w - 1);
            let x1c = ((x0 + 1.0).max(0.0) as usize).min(w - 1);
            let one = F::one();
            out[(i, j)] = (one - wx) * (one - wy) * src[(y0c, x0c)]
                + wx * (one - wy) * src[(y0c, x1c)]
                + (one - wx) * wy * src[(y1c, x0c)]
                + wx * wy * src[(y1c, x1c)];
        }
    }
    out
}

/// Reshape helper: flattens a C×H×W tensor to (H·W)×C token rows.
pub fn flatten_tokens<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 3);
    let xv = x.value().view().into_dimensionality::<Ix3>().unwrap();
    let (c, h, w) = xv.dim();
    // C×H×W -> (H·W)×C requires a transpose, not just a reshape.
    let mut out = Array2::<F>::zeros((h * w, c));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j, ch)] = xv[(ch, i, j)];
            }
        }
    }
    Tensor::op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array3::<F>::zeros((c, h, w));
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        gx[(ch, i, j)] = g2[(i * w + j, ch)];
                    }
                }
            }
            vec![gx.into_dyn()]
        }),
    )
}

/// Inverse of [`flatten_tokens`]: (H·W)×C token rows back to C×H×W.
pub fn unflatten_tokens<F: Elem>(x: &Tensor<F>, h: usize, w: usize) -> Tensor<F> {
    let xv = x.value().view().into_dimensionality::<Ix2>().unwrap();
    let c = xv.ncols();
    assert_eq!(xv.nrows(), h * w);
    let mut out = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch, i, j)] = xv[(i * w + j, ch)];
            }
        }
    }
    Tensor::op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = Array2::<F>::zeros((h * w, c));
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        gx[(i * w + j, ch)] = g3[(ch, i, j)];
                    }
                }
            }
            vec![gx.into_dyn()]
        }),
    )
}

/// Non-grad upsampling of a 2-D array to an arbitrary size (inference masks).
pub fn upsample_to<F: Elem>(src: &Array2<F>, ho: usize, wo: usize) -> Array2<F> {
    resize_bilinear(src, ho, wo)
}

/// Convenience: constant ArrayD from a 2-D array.
pub fn dyn2<F: Elem>(a: Array2<F>) -> ArrayD<F> {
    a.into_dyn()
}
