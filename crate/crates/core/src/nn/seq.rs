use serde::{Deserialize, Serialize};

use crate::nn::{avg_pool2, avg_pool2_backward, flatten, silu, silu_backward, unflatten, Conv2d, Linear, Matrix, ParamLayout, Real, Tensor};

/// `conv3x3 -> SiLU -> avgpool2` blocks followed by a stack of dense layers.
///
/// Dense layers have no activation between them, so the penultimate output is
/// a linear feature space (used as the identity embedding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_widths: Vec<usize>,
    pub dense: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ConvNet {
    pub spec: ConvNetSpec,
    pub layout: ParamLayout,
    convs: Vec<Conv2d>,
    linears: Vec<Linear>,
    flat: (usize, usize, usize),
}

pub struct ConvNetTrace<T> {
    conv_inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    dense_inputs: Vec<Matrix<T>>,
    /// Output of every dense layer, in order.
    pub outputs: Vec<Matrix<T>>,
}

impl ConvNet {
    pub fn new(spec: ConvNetSpec) -> Self {
        let mut layout = ParamLayout::default();
        let mut convs = Vec::new();
        let mut cin = spec.in_channels;
        let (mut h, mut w) = (spec.height, spec.width);
        for (i, &c) in spec.conv_widths.iter().enumerate() {
            let conv = Conv2d::same(cin, c, 3);
            layout.push(format!("conv{i}.w"), &[c, cin, 3, 3]);
            layout.push(format!("conv{i}.b"), &[c]);
            convs.push(conv);
            cin = c;
            h /= 2;
            w /= 2;
        }
        let mut linears = Vec::new();
        let mut fin = cin * h * w;
        for (i, &f) in spec.dense.iter().enumerate() {
            layout.push(format!("fc{i}.w"), &[f, fin]);
            layout.push(format!("fc{i}.b"), &[f]);
            linears.push(Linear { fin, fout: f });
            fin = f;
        }
        Self { flat: (cin, h, w), spec, layout, convs, linears }
    }

    pub fn init<R: rand::Rng>(&self, rng: &mut R) -> Vec<f32> {
        super::init_params(&self.layout, |g| g.shape[1..].iter().product(), rng)
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> ConvNetTrace<T> {
        let mut trace = ConvNetTrace { conv_inputs: vec![], pre: vec![], dense_inputs: vec![], outputs: vec![] };
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let w = self.layout.slice(params, 2 * i);
            let b = self.layout.slice(params, 2 * i + 1);
            let pre = conv.forward(&h, w, Some(b));
            trace.conv_inputs.push(std::mem::replace(&mut h, avg_pool2(&silu(&pre))));
            trace.pre.push(pre);
        }
        let mut m = flatten(&h);
        let base = 2 * self.convs.len();
        for (i, lin) in self.linears.iter().enumerate() {
            let w = self.layout.slice(params, base + 2 * i);
            let b = self.layout.slice(params, base + 2 * i + 1);
            let y = lin.forward(&m, w, b);
            trace.dense_inputs.push(m);
            trace.outputs.push(y.clone());
            m = y;
        }
        trace
    }

    /// Parameter gradient given the gradient of the final dense output.
    pub fn backward<T: Real>(&self, params: &[T], trace: &ConvNetTrace<T>, dout: &Matrix<T>) -> Vec<T> {
        let mut grads = vec![T::zero(); params.len()];
        let base = 2 * self.convs.len();
        let mut d = dout.clone();
        for (i, lin) in self.linears.iter().enumerate().rev() {
            let w = self.layout.slice(params, base + 2 * i);
            let (gw, gb) = split_pair(&self.layout, &mut grads, base + 2 * i);
            d = lin.backward(&trace.dense_inputs[i], &d, w, gw, gb, true).expect("dx requested");
        }
        let (c, h, w) = self.flat;
        let mut dt = unflatten(&d, c, h, w);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let dpost = avg_pool2_backward(&dt);
            let dpre = silu_backward(&trace.pre[i], &dpost);
            let wt = self.layout.slice(params, 2 * i);
            let (gw, gb) = split_pair(&self.layout, &mut grads, 2 * i);
            match conv.backward(&dpre, &trace.conv_inputs[i], wt, gw, Some(gb), i > 0) {
                Some(dx) => dt = dx,
                None => break,
            }
        }
        grads
    }
}

/// Mutable views of two adjacent groups (weight, bias).
pub(crate) fn split_pair<'a, T>(layout: &ParamLayout, grads: &'a mut [T], first: usize) -> (&'a mut [T], &'a mut [T]) {
    let a = layout.group(first).range();
    let b = layout.group(first + 1).range();
    debug_assert_eq!(a.end, b.start);
    let (head, tail) = grads[a.start..b.end].split_at_mut(a.len());
    (head, tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gradient_matches_finite_differences() {
        let net = ConvNet::new(ConvNetSpec { in_channels: 1, height: 4, width: 4, conv_widths: vec![2], dense: vec![3, 2] });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = super::super::cast_params(&net.init(&mut rng));
        let x = Tensor { c: 1, n: 2, h: 4, w: 4, data: (0..32).map(|i| ((i * 37 % 17) as f64) / 17.0).collect() };
        let target = [0.3, -0.2, 0.1, 0.5];
        let loss = |p: &[f64]| -> f64 {
            let t = net.forward(p, &x);
            t.outputs.last().unwrap().data.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let t = net.forward(&p, &x);
        let out = t.outputs.last().unwrap();
        let dout = Matrix { rows: 2, cols: 2, data: out.data.iter().zip(&target).map(|(a, b)| a - b).collect() };
        let g = net.backward(&p, &t, &dout);
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += 1e-6;
            let lp = loss(&pp);
            pp[i] -= 2e-6;
            let lm = loss(&pp);
            let fd = (lp - lm) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }
}
