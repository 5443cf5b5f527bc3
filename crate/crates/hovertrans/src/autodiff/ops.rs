//! Differentiable operations on the tape.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix3, IxDyn, Slice};

use super::{as1, as2, concat_host, reshaped, standard, BackwardFn, Graph, NodeId};

pub mod conv;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

impl Graph {
    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = &self.values[a] + &self.values[b];
        let back: BackwardFn = Box::new(move |_, g| vec![(a, g.clone()), (b, g.clone())]);
        self.push(value, Some(back), None)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over the
    /// leading axes). The backward pass sums `b`'s gradient over those axes.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == sb[..],
            "broadcast add: {sb:?} is not a suffix of {sa:?}"
        );
        let lead: usize = sa[..sa.len() - sb.len()].iter().product();
        let tail: usize = sb.iter().product();
        let mut value = self.values[a].clone();
        {
            let mut v2 = value.view_mut().into_shape_with_order((lead, tail)).unwrap();
            let bv = self.values[b].view().into_shape_with_order(tail).unwrap();
            for mut row in v2.rows_mut() {
                row += &bv;
            }
        }
        let back: BackwardFn = Box::new(move |_, g| {
            let g2 = g.view().into_shape_with_order((lead, tail)).unwrap();
            let db = g2.sum_axis(Axis(0));
            vec![
                (a, g.clone()),
                (b, reshaped(db.into_dyn(), &sb)),
            ]
        });
        self.push(value, Some(back), None)
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.values[a] * c;
        let back: BackwardFn = Box::new(move |_, g| vec![(a, g * c)]);
        self.push(value, Some(back), None)
    }

    /// Affine map `x @ w + b` with `x: (N, K)`, `w: (K, D)`, `b: (D)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.values[x]);
        let wv = as2(&self.values[w]);
        let bv = as1(&self.values[b]);
        assert_eq!(xv.ncols(), wv.nrows(), "linear inner dim");
        assert_eq!(wv.ncols(), bv.len(), "linear bias dim");
        let mut y = xv.dot(&wv);
        y += &bv;
        let back: BackwardFn = Box::new(move |vals, g| {
            let g2 = as2(g);
            let xv = as2(&vals[x]);
            let wv = as2(&vals[w]);
            let dx = g2.dot(&wv.t());
            let dw = xv.t().dot(&g2);
            let db = g2.sum_axis(Axis(0));
            vec![
                (x, dx.into_dyn()),
                (w, dw.into_dyn()),
                (b, db.into_dyn()),
            ]
        });
        self.push(y.into_dyn(), Some(back), None)
    }

    /// Plain matrix product `(M, K) x (K, N) -> (M, N)`, no bias.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.values[a]);
        let bv = as2(&self.values[b]);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim");
        let y = av.dot(&bv);
        let back: BackwardFn = Box::new(move |vals, g| {
            let g2 = as2(g);
            let av = as2(&vals[a]);
            let bv = as2(&vals[b]);
            vec![
                (a, g2.dot(&bv.t()).into_dyn()),
                (b, av.t().dot(&g2).into_dyn()),
            ]
        });
        self.push(y.into_dyn(), Some(back), None)
    }

    /// Batched matmul over the leading axis: `(N, T, K) x (N, K, S) -> (N, T, S)`.
    /// With `transpose_b`, the second operand is `(N, S, K)`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let av = self.values[a].view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.values[b].view().into_dimensionality::<Ix3>().unwrap();
        let (n, t, k) = av.dim();
        let (nb, b1, b2) = bv.dim();
        assert_eq!(n, nb, "bmm batch dims");
        let s = if transpose_b {
            assert_eq!(b2, k, "bmm inner dim");
            b1
        } else {
            assert_eq!(b1, k, "bmm inner dim");
            b2
        };
        let mut out = Array3::<f64>::zeros((n, t, s));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let prod = if transpose_b {
                ai.dot(&bi.t())
            } else {
                ai.dot(&bi)
            };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let back: BackwardFn = Box::new(move |vals, g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let av = vals[a].view().into_dimensionality::<Ix3>().unwrap();
            let bv = vals[b].view().into_dimensionality::<Ix3>().unwrap();
            let mut da = Array3::<f64>::zeros(av.dim());
            let mut db = Array3::<f64>::zeros(bv.dim());
            for i in 0..n {
                let gi = gv.index_axis(Axis(0), i);
                let ai = av.index_axis(Axis(0), i);
                let bi = bv.index_axis(Axis(0), i);
                if transpose_b {
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                    db.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                } else {
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
            }
            vec![(a, da.into_dyn()), (b, db.into_dyn())]
        });
        self.push(out.into_dyn(), Some(back), None)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax needs rank >= 1");
        let rows = self.values[x].len() / d;
        let xv = self.values[x].view().into_shape_with_order((rows, d)).unwrap();
        let mut y = Array2::<f64>::zeros((rows, d));
        for (r, row) in xv.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                y[(r, c)] = e;
                sum += e;
            }
            y.row_mut(r).mapv_inplace(|v| v / sum);
        }
        let me = self.len();
        let back: BackwardFn = Box::new(move |vals, g| {
            let yv = vals[me].view().into_shape_with_order((rows, d)).unwrap();
            let gv = g.view().into_shape_with_order((rows, d)).unwrap();
            let mut dx = Array2::<f64>::zeros((rows, d));
            for r in 0..rows {
                let dot: f64 = yv.row(r).iter().zip(gv.row(r)).map(|(y, g)| y * g).sum();
                for c in 0..d {
                    dx[(r, c)] = yv[(r, c)] * (gv[(r, c)] - dot);
                }
            }
            vec![(x, reshaped(dx.into_dyn(), g.shape()))]
        });
        self.push(reshaped(y.into_dyn(), &shape), Some(back), None)
    }

    /// Layer normalization over the last axis with learned affine.
    /// Each slice is centered and scaled to unit variance (biased estimator,
    /// `eps` inside the square root) before `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm needs rank >= 1");
        assert_eq!(self.shape(gamma), [d], "layer_norm gamma dim");
        assert_eq!(self.shape(beta), [d], "layer_norm beta dim");
        let rows = self.values[x].len() / d;
        let (xhat, _) = normalize_rows(&self.values[x], rows, d, eps);
        let gv = as1(&self.values[gamma]);
        let bv = as1(&self.values[beta]);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&gv.view(), |v, &g| *v *= g);
            row += &bv;
        }
        let back: BackwardFn = Box::new(move |vals, g| {
            let (xhat, inv) = normalize_rows(&vals[x], rows, d, eps);
            let gv = as1(&vals[gamma]);
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            let mut dgamma = Array1::<f64>::zeros(d);
            let mut dbeta = Array1::<f64>::zeros(d);
            let mut dx = Array2::<f64>::zeros((rows, d));
            for r in 0..rows {
                let grow = g2.row(r);
                let xrow = xhat.row(r);
                let mut dxhat = Array1::<f64>::zeros(d);
                for c in 0..d {
                    dgamma[c] += grow[c] * xrow[c];
                    dbeta[c] += grow[c];
                    dxhat[c] = grow[c] * gv[c];
                }
                let mean_dxhat = dxhat.sum() / d as f64;
                let mean_dxhat_x: f64 =
                    dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for c in 0..d {
                    dx[(r, c)] = inv[r] * (dxhat[c] - mean_dxhat - xrow[c] * mean_dxhat_x);
                }
            }
            vec![
                (x, reshaped(dx.into_dyn(), g.shape())),
                (gamma, dgamma.into_dyn()),
                (beta, dbeta.into_dyn()),
            ]
        });
        self.push(reshaped(y.into_dyn(), &shape), Some(back), None)
    }

    /// Per-sample normalization of a feature map over all of its (H, W, C)
    /// entries, followed by a per-channel affine. Uses no cross-sample
    /// statistics, so samples in a batch never mix.
    pub fn map_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        assert!(eps > 0.0, "map_norm eps must be positive");
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2, "map_norm needs a batch axis");
        let batch = shape[0];
        let c = *shape.last().unwrap();
        assert_eq!(self.shape(gamma), [c], "map_norm gamma dim");
        assert_eq!(self.shape(beta), [c], "map_norm beta dim");
        let m = self.values[x].len() / batch;
        let (xhat, _) = normalize_rows(&self.values[x], batch, m, eps);
        let gv = as1(&self.values[gamma]);
        let bv = as1(&self.values[beta]);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gv[j % c] + bv[j % c];
            }
        }
        let back: BackwardFn = Box::new(move |vals, g| {
            let (xhat, inv) = normalize_rows(&vals[x], batch, m, eps);
            let gv = as1(&vals[gamma]);
            let g2 = g.view().into_shape_with_order((batch, m)).unwrap();
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            let mut dx = Array2::<f64>::zeros((batch, m));
            for b in 0..batch {
                let grow = g2.row(b);
                let xrow = xhat.row(b);
                let mut dxhat = Array1::<f64>::zeros(m);
                for j in 0..m {
                    dgamma[j % c] += grow[j] * xrow[j];
                    dbeta[j % c] += grow[j];
                    dxhat[j] = grow[j] * gv[j % c];
                }
                let mean_dxhat = dxhat.sum() / m as f64;
                let mean_dxhat_x: f64 =
                    dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                for j in 0..m {
                    dx[(b, j)] = inv[b] * (dxhat[j] - mean_dxhat - xrow[j] * mean_dxhat_x);
                }
            }
            vec![
                (x, reshaped(dx.into_dyn(), g.shape())),
                (gamma, dgamma.into_dyn()),
                (beta, dbeta.into_dyn()),
            ]
        });
        self.push(reshaped(y.into_dyn(), &shape), Some(back), None)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.values[x].mapv(|v| v * erf_cdf(v));
        let back: BackwardFn = Box::new(move |vals, g| {
            let dx = ndarray::Zip::from(&vals[x])
                .and(g)
                .map_collect(|&v, &g| g * (erf_cdf(v) + v * INV_SQRT_2PI * (-0.5 * v * v).exp()));
            vec![(x, dx)]
        });
        self.push(value, Some(back), None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.values[x].mapv(|v| v.max(0.0));
        let back: BackwardFn = Box::new(move |vals, g| {
            let dx = ndarray::Zip::from(&vals[x])
                .and(g)
                .map_collect(|&v, &g| if v > 0.0 { g } else { 0.0 });
            vec![(x, dx)]
        });
        self.push(value, Some(back), None)
    }

    /// Reinterprets the value with a new shape (row-major, same element count).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let old = self.shape(x).to_vec();
        let value = reshaped(self.values[x].clone(), shape);
        let back: BackwardFn = Box::new(move |_, g| vec![(x, reshaped(g.clone(), &old))]);
        self.push(value, Some(back), None)
    }

    /// Permutes axes; the result is materialized in standard layout.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let axes = axes.to_vec();
        let value = standard(self.values[x].view().permuted_axes(IxDyn(&axes)));
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let back: BackwardFn =
            Box::new(move |_, g| vec![(x, standard(g.view().permuted_axes(IxDyn(&inverse))))]);
        self.push(value, Some(back), None)
    }

    /// Concatenates nodes along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.values[p].view()).collect();
        let value = concat_host(axis, &views);
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let parts = parts.to_vec();
        let back: BackwardFn = Box::new(move |_, g| {
            let mut out = Vec::with_capacity(parts.len());
            let mut off = 0;
            for (&p, &len) in parts.iter().zip(&lens) {
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(off..off + len))
                    .to_owned();
                out.push((p, standard(piece.view())));
                off += len;
            }
            out
        });
        self.push(value, Some(back), None)
    }

    /// Gathers tokens along axis 1: `out[:, i, :] = x[:, index[i], :]`.
    /// The backward pass scatter-adds, so a token used by several outputs
    /// accumulates all of their gradients.
    pub fn gather_tokens(&mut self, x: NodeId, index: &[usize]) -> NodeId {
        let xv = self.values[x].view().into_dimensionality::<Ix3>().unwrap();
        let (b, t, d) = xv.dim();
        assert!(index.iter().all(|&i| i < t), "gather index out of range");
        let mut out = Array3::<f64>::zeros((b, index.len(), d));
        for (i, &src) in index.iter().enumerate() {
            out.slice_axis_mut(Axis(1), Slice::from(i..i + 1))
                .assign(&xv.slice_axis(Axis(1), Slice::from(src..src + 1)));
        }
        let index = index.to_vec();
        let back: BackwardFn = Box::new(move |_, g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = Array3::<f64>::zeros((b, t, d));
            for (i, &src) in index.iter().enumerate() {
                let mut slot = dx.slice_axis_mut(Axis(1), Slice::from(src..src + 1));
                slot += &gv.slice_axis(Axis(1), Slice::from(i..i + 1));
            }
            vec![(x, dx.into_dyn())]
        });
        self.push(out.into_dyn(), Some(back), None)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let value = ArrayD::from_elem(IxDyn(&[1]), self.values[x].sum());
        let back: BackwardFn = Box::new(move |_, g| {
            vec![(x, ArrayD::from_elem(IxDyn(&shape), g[[0]]))]
        });
        self.push(value, Some(back), None)
    }

    /// Weighted sum against a fixed coefficient array (handy for gradient
    /// checks, where a plain sum could hide sign errors that cancel).
    pub fn dot_all(&mut self, x: NodeId, weights: ArrayD<f64>) -> NodeId {
        assert_eq!(self.shape(x), weights.shape());
        let value = ArrayD::from_elem(
            IxDyn(&[1]),
            self.values[x]
                .iter()
                .zip(weights.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>(),
        );
        let back: BackwardFn = Box::new(move |_, g| vec![(x, &weights * g[[0]])]);
        self.push(value, Some(back), None)
    }

    /// Mean softmax cross-entropy between `logits: (B, K)` and class labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = as2(&self.values[logits]);
        let (b, k) = lv.dim();
        assert_eq!(labels.len(), b, "one label per row");
        assert!(labels.iter().all(|&l| l < k), "label out of range");
        let mut total = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let labels = labels.to_vec();
        let value = ArrayD::from_elem(IxDyn(&[1]), total / b as f64);
        let back: BackwardFn = Box::new(move |vals, g| {
            let lv = as2(&vals[logits]);
            let scale = g[[0]] / b as f64;
            let mut dl = Array2::<f64>::zeros((b, k));
            for (r, row) in lv.rows().into_iter().enumerate() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                for c in 0..k {
                    let p = (row[c] - m).exp() / sum;
                    dl[(r, c)] = scale * (p - if c == labels[r] { 1.0 } else { 0.0 });
                }
            }
            vec![(logits, dl.into_dyn())]
        });
        self.push(value, Some(back), None)
    }

    /// Extracts a single entry of a rank-2 node as a scalar (used to seed
    /// backward passes from one logit).
    pub fn pick(&mut self, x: NodeId, row: usize, col: usize) -> NodeId {
        let xv = as2(&self.values[x]);
        let dim = xv.dim();
        let value = ArrayD::from_elem(IxDyn(&[1]), xv[(row, col)]);
        let back: BackwardFn = Box::new(move |_, g| {
            let mut dx = Array2::<f64>::zeros(dim);
            dx[(row, col)] = g[[0]];
            vec![(x, dx.into_dyn())]
        });
        self.push(value, Some(back), None)
    }
}

/// Centers and scales each of `rows` row slices of length `d` to zero mean
/// and unit variance. Returns the normalized rows and per-row `1/sqrt(var+eps)`.
fn normalize_rows(x: &ArrayD<f64>, rows: usize, d: usize, eps: f64) -> (Array2<f64>, Vec<f64>) {
    let xv = x.view().into_shape_with_order((rows, d)).unwrap();
    let mut xhat = Array2::<f64>::zeros((rows, d));
    let mut inv = Vec::with_capacity(rows);
    for (r, row) in xv.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv.push(s);
        for c in 0..d {
            xhat[(r, c)] = (row[c] - mean) * s;
        }
    }
    (xhat, inv)
}
