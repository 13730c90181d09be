//! Encoder-decoder with skip connections: one 3x3 conv + relu per level on
//! the contracting path, 2x2 max pooling between levels, nearest-neighbour
//! upsampling plus skip concatenation and a 3x3 conv + relu per level on the
//! expanding path.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use super::conv::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d,
};
use super::{ParamRef, Parameterized, Scalar};

#[derive(Clone)]
pub struct UNet<F> {
    /// enc[l] operates at spatial scale 1/2^l; the last one is the bottleneck.
    pub enc: Vec<Conv2d<F>>,
    /// dec[l] produces the level-l output after upsampling and skip concat.
    pub dec: Vec<Conv2d<F>>,
    pub depth: usize,
}

pub struct UNetCache<F> {
    input: Array3<F>,
    /// Post-relu encoder outputs (the skip tensors).
    enc_out: Vec<Array3<F>>,
    pool_idx: Vec<Array3<u8>>,
    /// Concatenated decoder inputs, one per dec conv (bottom-up order as dec).
    dec_in: Vec<Array3<F>>,
    dec_out: Vec<Array3<F>>,
}

impl<F: Scalar> UNet<F> {
    /// Channel widths per level grow toward the bottleneck:
    /// level l gets `max(1, out_ch >> (depth-1-l))`; the full-resolution
    /// decoder output has `out_ch` channels.
    pub fn new(name: &str, in_ch: usize, out_ch: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(depth >= 2, "unet depth must be >= 2");
        let width = |l: usize| (out_ch >> (depth - 1 - l)).max(1);
        let mut enc = Vec::new();
        for l in 0..depth {
            let cin = if l == 0 { in_ch } else { width(l - 1) };
            enc.push(Conv2d::new(&format!("{name}.enc{l}"), cin, width(l), 3, true, rng));
        }
        let mut dec = Vec::new();
        for l in 0..depth - 1 {
            let cin = width(l + 1) + width(l);
            let cout = if l == 0 { out_ch } else { width(l) };
            dec.push(Conv2d::new(&format!("{name}.dec{l}"), cin, cout, 3, true, rng));
        }
        UNet { enc, dec, depth }
    }

    pub fn out_channels(&self) -> usize {
        if self.depth == 1 {
            self.enc[0].c_out()
        } else {
            self.dec[0].c_out()
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, UNetCache<F>) {
        let mut cache = UNetCache {
            input: x.clone(),
            enc_out: Vec::with_capacity(self.depth),
            pool_idx: Vec::with_capacity(self.depth - 1),
            dec_in: Vec::with_capacity(self.depth - 1),
            dec_out: Vec::with_capacity(self.depth - 1),
        };
        let mut cur = x.clone();
        for l in 0..self.depth {
            let y = relu(&self.enc[l].forward(&cur));
            cache.enc_out.push(y.clone());
            if l + 1 < self.depth {
                let (p, idx) = maxpool2(&y);
                cache.pool_idx.push(idx);
                cur = p;
            } else {
                cur = y;
            }
        }
        for l in (0..self.depth - 1).rev() {
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &cache.enc_out[l]);
            let y = relu(&self.dec[l].forward(&cat));
            cache.dec_in.push(cat);
            cache.dec_out.push(y.clone());
            cur = y;
        }
        (cur, cache)
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &UNetCache<F>, gy: &Array3<F>) -> Array3<F> {
        // skip gradients to be added when the encoder path is walked
        let mut skip_grads: Vec<Option<Array3<F>>> = vec![None; self.depth];
        let mut g = gy.clone();
        // decoder, top level (0) back down to the bottleneck
        for l in 0..self.depth - 1 {
            // dec convs were pushed bottom-up in forward: index of level l
            let slot = self.depth - 2 - l;
            let g_pre = relu_backward(&cache.dec_out[slot], &g);
            let g_cat = self.dec[l].backward(&cache.dec_in[slot], &g_pre);
            let up_ch = self.dec[l].c_in() - self.enc[l].c_out();
            let (g_up, g_skip) = split_channels(&g_cat, up_ch);
            skip_grads[l] = Some(match skip_grads[l].take() {
                Some(prev) => prev + &g_skip,
                None => g_skip,
            });
            g = upsample2_backward(&g_up);
        }
        // g now holds the gradient at the bottleneck output
        let mut g_cur = g;
        for l in (0..self.depth).rev() {
            if l + 1 < self.depth {
                let (_, h, w) = cache.enc_out[l].dim();
                let mut gp = maxpool2_backward(&g_cur, &cache.pool_idx[l], h, w);
                if let Some(sg) = skip_grads[l].take() {
                    gp = gp + &sg;
                }
                g_cur = gp;
            } else if let Some(sg) = skip_grads[l].take() {
                g_cur = g_cur + &sg;
            }
            let g_pre = relu_backward(&cache.enc_out[l], &g_cur);
            let pooled;
            let x_in = if l == 0 {
                &cache.input
            } else {
                pooled = cache.enc_pooled_tmp(l - 1);
                &pooled
            };
            g_cur = self.enc[l].backward(x_in, &g_pre);
        }
        g_cur
    }
}

impl<F: Scalar> UNetCache<F> {
    /// The input that fed enc conv `l+1`: enc_out[l] max-pooled. Recomputed
    /// from the stored argmax so the forward pass does not keep extra copies.
    fn enc_pooled_tmp(&self, l: usize) -> Array3<F> {
        let x = &self.enc_out[l];
        let (c, h, w) = x.dim();
        let idx = &self.pool_idx[l];
        let offs = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)];
        let mut y = Array3::zeros((c, h / 2, w / 2));
        for ((ci, r, col), v) in y.indexed_iter_mut() {
            let (dr, dc) = offs[idx[(ci, r, col)] as usize];
            *v = x[(ci, 2 * r + dr, 2 * col + dc)];
        }
        y
    }
}

impl<F: Scalar> Parameterized<F> for UNet<F> {
    fn param_refs(&mut self, prefix: &str) -> Vec<ParamRef<'_, F>> {
        let mut refs = Vec::new();
        for conv in self.enc.iter_mut() {
            refs.extend(conv.param_refs(prefix));
        }
        for conv in self.dec.iter_mut() {
            refs.extend(conv.param_refs(prefix));
        }
        refs
    }
}
