//! Convolutional LSTM cell: gates are 3x3 convolutions over the input and
//! the previous hidden state, summed. Gate block order is [i, f, g, o].

use ndarray::{s, Array3, Array4};
use rand_chacha::ChaCha8Rng;

use super::conv::Conv2d;
use super::{orthogonal_rows, ParamRef, Parameterized, Scalar};

#[derive(Clone)]
pub struct ConvLstm<F> {
    /// Input-to-gates convolution (with bias).
    pub wx: Conv2d<F>,
    /// Hidden-to-gates convolution (no bias), orthogonal-style init.
    pub wh: Conv2d<F>,
    pub hidden: usize,
}

pub struct LstmStepCache<F> {
    x: Array3<F>,
    h_prev: Array3<F>,
    c_prev: Array3<F>,
    i: Array3<F>,
    f: Array3<F>,
    g: Array3<F>,
    o: Array3<F>,
    tanh_c: Array3<F>,
}

impl<F: Scalar> ConvLstm<F> {
    pub fn new(name: &str, in_ch: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = Conv2d::new(&format!("{name}.wx"), in_ch, 4 * hidden, 3, true, rng);
        let wo = orthogonal_rows::<F>(rng, 4 * hidden, hidden * 9);
        let weight = Array4::from_shape_vec((4 * hidden, hidden, 3, 3), wo).unwrap();
        let wh = Conv2d::from_weight(&format!("{name}.wh"), weight, None);
        ConvLstm { wx, wh, hidden }
    }

    pub fn zero_state(&self, h: usize, w: usize) -> (Array3<F>, Array3<F>) {
        (
            Array3::zeros((self.hidden, h, w)),
            Array3::zeros((self.hidden, h, w)),
        )
    }

    pub fn step(
        &self,
        x: &Array3<F>,
        h_prev: &Array3<F>,
        c_prev: &Array3<F>,
    ) -> (Array3<F>, Array3<F>, LstmStepCache<F>) {
        let gates = self.wx.forward(x) + self.wh.forward(h_prev);
        let hc = self.hidden;
        let sig = |a: ndarray::ArrayView3<F>| a.mapv(|v| F::one() / (F::one() + (-v).exp()));
        let i = sig(gates.slice(s![..hc, .., ..]));
        let f = sig(gates.slice(s![hc..2 * hc, .., ..]));
        let g = gates.slice(s![2 * hc..3 * hc, .., ..]).mapv(|v| v.tanh());
        let o = sig(gates.slice(s![3 * hc.., .., ..]));
        let c = &f * c_prev + &i * &g;
        let tanh_c = c.mapv(|v| v.tanh());
        let h = &o * &tanh_c;
        let cache = LstmStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            i,
            f,
            g,
            o,
            tanh_c,
        };
        (h, c, cache)
    }

    /// Backward through one step. `gh`/`gc` are the gradients flowing into
    /// this step's outputs; returns (gx, gh_prev, gc_prev).
    pub fn backward_step(
        &mut self,
        cache: &LstmStepCache<F>,
        gh: &Array3<F>,
        gc: &Array3<F>,
    ) -> (Array3<F>, Array3<F>, Array3<F>) {
        let one = F::one();
        let go = gh * &cache.tanh_c;
        let gc_total = gc + &(gh * &cache.o * &cache.tanh_c.mapv(|t| one - t * t));
        let gf = &gc_total * &cache.c_prev;
        let gc_prev = &gc_total * &cache.f;
        let gi = &gc_total * &cache.g;
        let gg = &gc_total * &cache.i;
        // pre-activation gradients
        let gi = gi * &cache.i.mapv(|v| v * (one - v));
        let gf = gf * &cache.f.mapv(|v| v * (one - v));
        let gg = gg * &cache.g.mapv(|v| one - v * v);
        let go = go * &cache.o.mapv(|v| v * (one - v));
        let ggates = ndarray::concatenate(
            ndarray::Axis(0),
            &[gi.view(), gf.view(), gg.view(), go.view()],
        )
        .unwrap();
        let gx = self.wx.backward(&cache.x, &ggates);
        let gh_prev = self.wh.backward(&cache.h_prev, &ggates);
        (gx, gh_prev, gc_prev)
    }
}

impl<F: Scalar> Parameterized<F> for ConvLstm<F> {
    fn param_refs(&mut self, prefix: &str) -> Vec<ParamRef<'_, F>> {
        let mut refs = self.wx.param_refs(prefix);
        refs.extend(self.wh.param_refs(prefix));
        refs
    }
}
