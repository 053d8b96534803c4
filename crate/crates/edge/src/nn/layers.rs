use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Ix1, Ix2, Ix4};
use rand::Rng;

use super::{join_name, Param, ParamSet};

/// Fully connected layer, y = x W^T + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Linear {
            w: Param::randn(&[out_dim, in_dim], std, rng),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let w = self.w.v.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.v.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
        {
            let mut gw = self.w.g.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw += &dy.t().dot(x);
            let mut gb = self.b.g.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &dy.sum_axis(ndarray::Axis(0));
        }
        let w = self.w.v.view().into_dimensionality::<Ix2>().unwrap();
        dy.dot(&w)
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_name(prefix, "w"), &self.w);
        f(&join_name(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "w"), &mut self.w);
        f(&join_name(prefix, "b"), &mut self.b);
    }
}

/// 3x3 same-padding convolution, stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub in_ch: usize,
    pub out_ch: usize,
}

const K: usize = 3;
const PAD: isize = 1;

impl Conv2d {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let std = (1.0 / (in_ch * K * K) as f64).sqrt();
        Conv2d {
            w: Param::randn(&[out_ch, in_ch, K, K], std, rng),
            b: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        assert_eq!(ci, self.in_ch, "conv input channels");
        let wv = self.w.v.view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.b.v.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array4::<f64>::zeros((n, self.out_ch, h, w));
        for bi in 0..n {
            for oc in 0..self.out_ch {
                let bias = bv[oc];
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bias;
                        for ic in 0..ci {
                            for ky in 0..K {
                                let iy = oy as isize + ky as isize - PAD;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..K {
                                    let ix = ox as isize + kx as isize - PAD;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wv[[oc, ic, ky, kx]]
                                        * x[[bi, ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                        y[[bi, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &ArrayView4<f64>, dy: &ArrayView4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        let wv = self.w.v.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let mut gw = self.w.g.view_mut().into_dimensionality::<Ix4>().unwrap();
        let mut gb = self.b.g.view_mut().into_dimensionality::<Ix1>().unwrap();
        let mut dx = Array4::<f64>::zeros((n, ci, h, w));
        for bi in 0..n {
            for oc in 0..self.out_ch {
                for oy in 0..h {
                    for ox in 0..w {
                        let go = dy[[bi, oc, oy, ox]];
                        if go == 0.0 {
                            continue;
                        }
                        gb[oc] += go;
                        for ic in 0..ci {
                            for ky in 0..K {
                                let iy = oy as isize + ky as isize - PAD;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..K {
                                    let ix = ox as isize + kx as isize - PAD;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[[bi, ic, iy as usize, ix as usize]];
                                    gw[[oc, ic, ky, kx]] += go * xv;
                                    dx[[bi, ic, iy as usize, ix as usize]] +=
                                        go * wv[[oc, ic, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_name(prefix, "w"), &self.w);
        f(&join_name(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "w"), &mut self.w);
        f(&join_name(prefix, "b"), &mut self.b);
    }
}

/// Token-embedding table with mean pooling over a token-id sequence.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        Embedding {
            table: Param::randn(&[vocab, dim], 1.0 / (dim as f64).sqrt(), rng),
            vocab,
            dim,
        }
    }

    /// Mean of the rows selected by `ids`.
    pub fn mean_pool(&self, ids: &[usize]) -> Array1<f64> {
        assert!(!ids.is_empty(), "empty token sequence");
        let t = self.table.v.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array1::<f64>::zeros(self.dim);
        for &id in ids {
            out += &t.row(id);
        }
        out / ids.len() as f64
    }

    pub fn backward_mean_pool(&mut self, ids: &[usize], dvec: &ArrayView2<f64>, row: usize) {
        let mut t = self.table.g.view_mut().into_dimensionality::<Ix2>().unwrap();
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            let mut r = t.row_mut(id);
            r.scaled_add(scale, &dvec.row(row));
        }
    }
}

impl ParamSet for Embedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_name(prefix, "table"), &self.table);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "table"), &mut self.table);
    }
}
