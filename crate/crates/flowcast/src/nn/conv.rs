//! Convolution and the small pointwise/resampling ops the UNets are built
//! from. Convolutions are stride-1 with symmetric zero padding, lowered to a
//! matrix product via im2col.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::{he_uniform, ParamRef, Scalar};

/// Lower (C,H,W) into a (C*k*k, H*W) patch matrix.
pub fn im2col<F: Scalar>(x: &Array3<F>, k: usize, pad: usize) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c_in * k * k, h * w));
    for c in 0..c_in {
        for dr in 0..k {
            for dc in 0..k {
                let row = (c * k + dr) * k + dc;
                let mut out_row = cols.row_mut(row);
                let out = out_row.as_slice_mut().unwrap();
                for r in 0..h {
                    let sr = r as isize + dr as isize - pad as isize;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![c, sr as usize, ..]);
                    let src = src.as_slice().unwrap();
                    let shift = dc as isize - pad as isize;
                    let (c0, c1) = if shift < 0 {
                        ((-shift) as usize, w)
                    } else {
                        (0, w - shift as usize)
                    };
                    for col in c0..c1 {
                        out[r * w + col] = src[(col as isize + shift) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a (C*k*k, H*W) patch-gradient matrix back onto a (C,H,W) grid.
pub fn col2im<F: Scalar>(cols: &Array2<F>, c_in: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<F> {
    let mut x = Array3::<F>::zeros((c_in, h, w));
    for c in 0..c_in {
        for dr in 0..k {
            for dc in 0..k {
                let row = (c * k + dr) * k + dc;
                let in_row = cols.row(row);
                let src = in_row.as_slice().unwrap();
                for r in 0..h {
                    let sr = r as isize + dr as isize - pad as isize;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let mut dst_row = x.slice_mut(s![c, sr as usize, ..]);
                    let dst = dst_row.as_slice_mut().unwrap();
                    let shift = dc as isize - pad as isize;
                    let (c0, c1) = if shift < 0 {
                        ((-shift) as usize, w)
                    } else {
                        (0, w - shift as usize)
                    };
                    for col in c0..c1 {
                        dst[(col as isize + shift) as usize] = dst[(col as isize + shift) as usize] + src[r * w + col];
                    }
                }
            }
        }
    }
    x
}

#[derive(Clone)]
pub struct Conv2d<F> {
    pub name: String,
    /// (out, in, k, k)
    pub weight: Array4<F>,
    pub bias: Option<Array1<F>>,
    pub gweight: Array4<F>,
    pub gbias: Option<Array1<F>>,
    pub k: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * k * k;
        let w = he_uniform::<F>(rng, fan_in, c_out * fan_in);
        Conv2d {
            name: name.to_string(),
            weight: Array4::from_shape_vec((c_out, c_in, k, k), w).unwrap(),
            bias: bias.then(|| Array1::zeros(c_out)),
            gweight: Array4::zeros((c_out, c_in, k, k)),
            gbias: bias.then(|| Array1::zeros(c_out)),
            k,
            pad: k / 2,
        }
    }

    pub fn from_weight(name: &str, weight: Array4<F>, bias: Option<Array1<F>>) -> Self {
        let k = weight.dim().2;
        let gweight = Array4::zeros(weight.dim());
        let gbias = bias.as_ref().map(|b| Array1::zeros(b.len()));
        Conv2d {
            name: name.to_string(),
            weight,
            bias,
            gweight,
            gbias,
            k,
            pad: k / 2,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    fn weight_mat(&self) -> Array2<F> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape((o, i * k * k)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.k, self.pad);
        let mut y = self.weight_mat().dot(&cols);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        y.into_shape((self.c_out(), h, w)).unwrap()
    }

    /// Accumulates weight/bias grads and returns the input gradient.
    pub fn backward(&mut self, x: &Array3<F>, gy: &Array3<F>) -> Array3<F> {
        let (c_in, h, w) = x.dim();
        let gy2 = gy.view().into_shape((self.c_out(), h * w)).unwrap();
        if let Some(gb) = &mut self.gbias {
            for (g, row) in gb.iter_mut().zip(gy2.axis_iter(Axis(0))) {
                *g = *g + row.sum();
            }
        }
        let cols = im2col(x, self.k, self.pad);
        let gw = gy2.dot(&cols.t());
        let (o, i, k, _) = self.weight.dim();
        self.gweight = &self.gweight + &gw.into_shape((o, i, k, k)).unwrap();
        let gcols = self.weight_mat().t().dot(&gy2);
        col2im(&gcols, c_in, h, w, self.k, self.pad)
    }

    pub fn param_refs(&mut self, prefix: &str) -> Vec<ParamRef<'_, F>> {
        let base = if prefix.is_empty() {
            self.name.clone()
        } else {
            format!("{prefix}.{}", self.name)
        };
        let mut refs = vec![ParamRef {
            name: format!("{base}.w"),
            data: self.weight.as_slice_mut().unwrap(),
            grad: self.gweight.as_slice_mut().unwrap(),
        }];
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), self.gbias.as_mut()) {
            refs.push(ParamRef {
                name: format!("{base}.b"),
                data: b.as_slice_mut().unwrap(),
                grad: gb.as_slice_mut().unwrap(),
            });
        }
        refs
    }
}

pub fn relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Backward of relu given the forward *output* (y > 0 iff x > 0).
pub fn relu_backward<F: Scalar>(y: &Array3<F>, gy: &Array3<F>) -> Array3<F> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

pub fn sigmoid<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// 2x2 max pooling; returns the pooled grid and the offset (0..4) of the
/// winning cell for the backward scatter.
pub fn maxpool2<F: Scalar>(x: &Array3<F>) -> (Array3<F>, Array3<u8>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims, got {h}x{w}");
    let (ph, pw) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, ph, pw));
    let mut idx = Array3::zeros((c, ph, pw));
    for ci in 0..c {
        for r in 0..ph {
            for col in 0..pw {
                let mut best = x[(ci, 2 * r, 2 * col)];
                let mut bi = 0u8;
                for (o, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[(ci, 2 * r + dr, 2 * col + dc)];
                    if v > best {
                        best = v;
                        bi = o as u8;
                    }
                }
                y[(ci, r, col)] = best;
                idx[(ci, r, col)] = bi;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<F: Scalar>(gy: &Array3<F>, idx: &Array3<u8>, h: usize, w: usize) -> Array3<F> {
    let (c, ph, pw) = gy.dim();
    let mut gx = Array3::zeros((c, h, w));
    let offs = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)];
    for ci in 0..c {
        for r in 0..ph {
            for col in 0..pw {
                let (dr, dc) = offs[idx[(ci, r, col)] as usize];
                gx[(ci, 2 * r + dr, 2 * col + dc)] = gy[(ci, r, col)];
            }
        }
    }
    gx
}

pub fn upsample2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for r in 0..h {
            for col in 0..w {
                let v = x[(ci, r, col)];
                y[(ci, 2 * r, 2 * col)] = v;
                y[(ci, 2 * r, 2 * col + 1)] = v;
                y[(ci, 2 * r + 1, 2 * col)] = v;
                y[(ci, 2 * r + 1, 2 * col + 1)] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Scalar>(gy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for r in 0..h {
            for col in 0..w {
                gx[(ci, r, col)] = gy[(ci, 2 * r, 2 * col)]
                    + gy[(ci, 2 * r, 2 * col + 1)]
                    + gy[(ci, 2 * r + 1, 2 * col)]
                    + gy[(ci, 2 * r + 1, 2 * col + 1)];
            }
        }
    }
    gx
}

/// Channel-wise concatenation of two (C,H,W) grids.
pub fn concat_channels<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap()
}

pub fn split_channels<F: Scalar>(x: &Array3<F>, c_first: usize) -> (Array3<F>, Array3<F>) {
    let a = x.slice(s![..c_first, .., ..]).to_owned();
    let b = x.slice(s![c_first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn rand_arr(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct O(N * k^2) convolution used as oracle for the im2col path.
    fn conv_naive(x: &Array3<f64>, wgt: &Array4<f64>, b: &Array1<f64>, pad: usize) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let (co, _, k, _) = wgt.dim();
        let mut y = Array3::zeros((co, h, w));
        for o in 0..co {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for dr in 0..k {
                            for dc in 0..k {
                                let sr = r as isize + dr as isize - pad as isize;
                                let sc = c as isize + dc as isize - pad as isize;
                                if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                                    acc += x[(i, sr as usize, sc as usize)] * wgt[(o, i, dr, dc)];
                                }
                            }
                        }
                    }
                    y[(o, r, c)] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new("c", 3, 4, 3, true, &mut rng);
        let x = rand_arr(&mut rng, 3, 5, 7);
        let y = conv.forward(&x);
        let y2 = conv_naive(&x, &conv.weight, conv.bias.as_ref().unwrap(), 1);
        for (a, b) in y.iter().zip(y2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, true, &mut rng);
        let x = rand_arr(&mut rng, 2, 4, 4);
        // loss = sum(y^2)/2 so gy = y
        let y = conv.forward(&x);
        let gx = conv.backward(&x, &y);
        let eps = 1e-6;
        // input grad
        for (i, _) in x.iter().enumerate().step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let lp: f64 = conv.forward(&xp).iter().map(|v| v * v / 2.0).sum();
            let lm: f64 = conv.forward(&xm).iter().map(|v| v * v / 2.0).sum();
            let num = (lp - lm) / (2.0 * eps);
            let ana = gx.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 1e-6, "input grad {i}: {num} vs {ana}");
        }
        // weight grad
        for i in (0..conv.weight.len()).step_by(11) {
            let orig = conv.weight.as_slice().unwrap()[i];
            conv.weight.as_slice_mut().unwrap()[i] = orig + eps;
            let lp: f64 = conv.forward(&x).iter().map(|v| v * v / 2.0).sum();
            conv.weight.as_slice_mut().unwrap()[i] = orig - eps;
            let lm: f64 = conv.forward(&x).iter().map(|v| v * v / 2.0).sum();
            conv.weight.as_slice_mut().unwrap()[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = conv.gweight.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 1e-6, "weight grad {i}: {num} vs {ana}");
        }
    }

    #[test]
    fn pool_upsample_roundtrip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&mut rng, 2, 6, 8);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.dim(), (2, 3, 4));
        let gx = maxpool2_backward(&y, &idx, 6, 8);
        assert_eq!(gx.dim(), x.dim());
        // each pooled value must appear at its argmax position
        for ((c, r, col), &v) in y.indexed_iter() {
            let offs = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)];
            let (dr, dc) = offs[idx[(c, r, col)] as usize];
            assert_eq!(x[(c, 2 * r + dr, 2 * col + dc)], v);
            assert_eq!(gx[(c, 2 * r + dr, 2 * col + dc)], v);
        }
        let up = upsample2(&y);
        assert_eq!(up.dim(), (2, 6, 8));
        let down = upsample2_backward(&up);
        for (a, b) in down.iter().zip(y.iter()) {
            assert!((a / 4.0 - b).abs() < 1e-12);
        }
    }
}
