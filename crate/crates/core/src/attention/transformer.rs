//! Post-norm Transformer encoder over packed rows with block-diagonal
//! (per-segment) multi-head attention, plus its reverse pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Contiguous run of packed rows that attend only to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Linear {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || dist.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

struct NormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / dim;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *istd;
        }
        let mut y = &normalized * &self.gain;
        y += &self.bias;
        (y, NormCache { normalized, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let dim = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), &istd) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / dim;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / dim;
            Zip::from(&mut row).and(&xhat).for_each(|d, &xh| {
                *d = istd * (*d - mean_d - xh * mean_dx);
            });
        }
        dx
    }
}

/// One encoder block: self-attention, residual + norm, feed-forward,
/// residual + norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn init(dim: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            query: Linear::xavier(dim, dim, rng),
            key: Linear::xavier(dim, dim, rng),
            value: Linear::xavier(dim, dim, rng),
            output: Linear::xavier(dim, dim, rng),
            norm1: LayerNorm::new(dim),
            ff_in: Linear::xavier(dim, ffn_dim, rng),
            ff_out: Linear::xavier(ffn_dim, dim, rng),
            norm2: LayerNorm::new(dim),
        }
    }

    pub fn zeros(dim: usize, ffn_dim: usize) -> Self {
        EncoderLayer {
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
            norm1: LayerNorm::zeros(dim),
            ff_in: Linear::zeros(dim, ffn_dim),
            ff_out: Linear::zeros(ffn_dim, dim),
            norm2: LayerNorm::zeros(dim),
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::with_capacity(16);
        for (name, lin) in [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ] {
            out.push((name, slice(&lin.weight)));
            out.push((name, slice1(&lin.bias)));
        }
        out.push(("norm1", slice1(&self.norm1.gain)));
        out.push(("norm1", slice1(&self.norm1.bias)));
        out.push(("ff_in", slice(&self.ff_in.weight)));
        out.push(("ff_in", slice1(&self.ff_in.bias)));
        out.push(("ff_out", slice(&self.ff_out.weight)));
        out.push(("ff_out", slice1(&self.ff_out.bias)));
        out.push(("norm2", slice1(&self.norm2.gain)));
        out.push(("norm2", slice1(&self.norm2.bias)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(16);
        for lin in [&mut self.query, &mut self.key, &mut self.value, &mut self.output] {
            out.push(lin.weight.as_slice_mut().expect("standard layout"));
            out.push(lin.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.norm1.gain.as_slice_mut().expect("standard layout"));
        out.push(self.norm1.bias.as_slice_mut().expect("standard layout"));
        for lin in [&mut self.ff_in, &mut self.ff_out] {
            out.push(lin.weight.as_slice_mut().expect("standard layout"));
            out.push(lin.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.norm2.gain.as_slice_mut().expect("standard layout"));
        out.push(self.norm2.bias.as_slice_mut().expect("standard layout"));
        out
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub heads: usize,
    pub layers: Vec<EncoderLayer>,
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities, segment-major then head.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm1: NormCache,
    y1: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    norm2: NormCache,
}

pub struct StackCache {
    layers: Vec<LayerCache>,
    segments: Vec<Segment>,
}

impl TransformerStack {
    pub fn init(dim: usize, ffn_dim: usize, layers: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "model dim must be divisible by head count");
        TransformerStack {
            heads,
            layers: (0..layers).map(|_| EncoderLayer::init(dim, ffn_dim, rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        TransformerStack {
            heads: self.heads,
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer::zeros(l.query.weight.nrows(), l.ff_in.weight.ncols()))
                .collect(),
        }
    }

    /// Runs every layer over `x`; rows attend only within their segment and
    /// only to rows with `mask == true`. Masked query rows get a zero
    /// attention output.
    pub fn forward(&self, x: Array2<f64>, segments: &[Segment], mask: &[bool]) -> (Array2<f64>, StackCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let (out, cache) = self.layer_forward(layer, h, segments, mask);
            caches.push(cache);
            h = out;
        }
        (
            h,
            StackCache {
                layers: caches,
                segments: segments.to_vec(),
            },
        )
    }

    /// Reverse pass: accumulates into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &StackCache, dy: Array2<f64>, grad: &mut TransformerStack) -> Array2<f64> {
        let mut d = dy;
        for ((layer, lc), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            d = self.layer_backward(layer, lc, &cache.segments, d, lg);
        }
        d
    }

    fn layer_forward(
        &self,
        layer: &EncoderLayer,
        x: Array2<f64>,
        segments: &[Segment],
        mask: &[bool],
    ) -> (Array2<f64>, LayerCache) {
        let q = layer.query.forward(&x);
        let k = layer.key.forward(&x);
        let v = layer.value.forward(&x);
        let (attn, probs) = segment_attention(&q, &k, &v, segments, mask, self.heads);
        let a = layer.output.forward(&attn);
        let (y1, norm1) = layer.norm1.forward(&(&x + &a));
        let hidden_pre = layer.ff_in.forward(&y1);
        let hidden = hidden_pre.mapv(|z| z.max(0.0));
        let f = layer.ff_out.forward(&hidden);
        let (y2, norm2) = layer.norm2.forward(&(&y1 + &f));
        (
            y2,
            LayerCache {
                input: x,
                q,
                k,
                v,
                probs,
                attn,
                norm1,
                y1,
                hidden_pre,
                hidden,
                norm2,
            },
        )
    }

    fn layer_backward(
        &self,
        layer: &EncoderLayer,
        c: &LayerCache,
        segments: &[Segment],
        dy2: Array2<f64>,
        g: &mut EncoderLayer,
    ) -> Array2<f64> {
        let dh2 = layer.norm2.backward(&c.norm2, &dy2, &mut g.norm2);
        let dhidden = layer.ff_out.backward(&c.hidden, &dh2, &mut g.ff_out);
        let mut dpre = dhidden;
        Zip::from(&mut dpre).and(&c.hidden_pre).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        let mut dy1 = layer.ff_in.backward(&c.y1, &dpre, &mut g.ff_in);
        dy1 += &dh2;
        let dh1 = layer.norm1.backward(&c.norm1, &dy1, &mut g.norm1);
        let dattn = layer.output.backward(&c.attn, &dh1, &mut g.output);
        let (dq, dk, dv) = segment_attention_backward(&c.q, &c.k, &c.v, &c.probs, segments, &dattn, self.heads);
        let mut dx = dh1;
        dx += &layer.query.backward(&c.input, &dq, &mut g.query);
        dx += &layer.key.backward(&c.input, &dk, &mut g.key);
        dx += &layer.value.backward(&c.input, &dv, &mut g.value);
        dx
    }
}

/// Masked softmax over each row of `scores` in place. Keys with
/// `key_mask == false` get probability 0; rows whose query is masked are
/// zeroed entirely.
pub fn masked_softmax(scores: &mut Array2<f64>, query_mask: &[bool], key_mask: &[bool]) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        if !query_mask[i] {
            row.fill(0.0);
            continue;
        }
        let max = row
            .iter()
            .zip(key_mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut total = 0.0;
        for (v, &m) in row.iter_mut().zip(key_mask) {
            *v = if m { (*v - max).exp() } else { 0.0 };
            total += *v;
        }
        row /= total;
    }
}

fn segment_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    segments: &[Segment],
    mask: &[bool],
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let dim = q.ncols();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        let rows = seg.offset..seg.offset + seg.len;
        let seg_mask = &mask[rows.clone()];
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qh.dot(&kh.t());
            p *= scale;
            masked_softmax(&mut p, seg_mask, seg_mask);
            out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    (out, probs)
}

fn segment_attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
    segments: &[Segment],
    dout: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dim = q.ncols();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (si, seg) in segments.iter().enumerate() {
        let rows = seg.offset..seg.offset + seg.len;
        for h in 0..heads {
            let p = &probs[si * heads + h];
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let doh: ArrayView2<f64> = dout.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&doh));
            let mut ds = doh.dot(&vh.t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - inner) * scale);
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one_over_valid_keys() {
        let mut scores = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.3);
        masked_softmax(&mut scores, &[true, true, false], &[true, true, false]);
        for i in 0..2 {
            let row = scores.row(i);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
        assert_eq!(scores.row(2).sum(), 0.0);
    }

    #[test]
    fn single_key_gets_all_the_weight() {
        let mut scores = Array2::from_elem((1, 1), 123.0);
        masked_softmax(&mut scores, &[true], &[true]);
        assert_eq!(scores[[0, 0]], 1.0);
    }

    #[test]
    fn segments_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = TransformerStack::init(8, 8, 2, 2, &mut rng);
        let x = Array2::from_shape_fn((10, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let segs = [Segment { offset: 0, len: 4 }, Segment { offset: 4, len: 6 }];
        let mask = vec![true; 10];
        let (y, _) = stack.forward(x.clone(), &segs, &mask);
        let mut x2 = x.clone();
        x2.row_mut(7).fill(3.0);
        let (y2, _) = stack.forward(x2, &segs, &mask);
        for i in 0..4 {
            assert_eq!(y.row(i), y2.row(i));
        }
        assert_ne!(y.row(5), y2.row(5));
    }
}
