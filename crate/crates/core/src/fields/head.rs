//! Two-layer perceptron: rectified hidden layer, linear output.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `[w1 (hidden × input) | b1 | w2 (output × hidden) | b2]`, row-major.
    pub params: Vec<f64>,
}

/// Forward intermediates needed by [`Mlp::backward`].
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pub hidden: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        let n = hidden * input + hidden + output * hidden + output;
        Self {
            input,
            hidden,
            output,
            params: vec![0.0; n],
        }
    }

    /// He-uniform weights (bound √(6 / fan_in)), zero biases.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let (w1, _, w2, _) = self.offsets();
        let b1 = (6.0 / self.input as f64).sqrt();
        for v in &mut self.params[w1.clone()] {
            *v = rng.random_range(-b1..b1);
        }
        let b2 = (6.0 / self.hidden as f64).sqrt();
        for v in &mut self.params[w2.clone()] {
            *v = rng.random_range(-b2..b2);
        }
    }

    fn offsets(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let a = self.hidden * self.input;
        let b = a + self.hidden;
        let c = b + self.output * self.hidden;
        (0..a, a..b, b..c, c..c + self.output)
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64], cache: &mut MlpCache) {
        let (w1, b1, w2, b2) = self.offsets();
        let (w1, b1, w2, b2) = (&self.params[w1], &self.params[b1], &self.params[w2], &self.params[b2]);
        cache.hidden.resize(self.hidden, 0.0);
        for j in 0..self.hidden {
            let row = &w1[j * self.input..(j + 1) * self.input];
            let z = b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            cache.hidden[j] = z.max(0.0);
        }
        for (o, dst) in out.iter_mut().enumerate() {
            let row = &w2[o * self.hidden..(o + 1) * self.hidden];
            *dst = b2[o] + row.iter().zip(&cache.hidden).map(|(w, h)| w * h).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and writes the input gradient.
    pub fn backward(&self, x: &[f64], cache: &MlpCache, grad_out: &[f64], grad: &mut [f64], grad_in: &mut [f64]) {
        let (w1r, b1r, w2r, b2r) = self.offsets();
        let w1 = &self.params[w1r.clone()];
        let w2 = &self.params[w2r.clone()];
        let mut g_hidden = vec![0.0; self.hidden];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[b2r.start + o] += g;
            let base = w2r.start + o * self.hidden;
            for j in 0..self.hidden {
                grad[base + j] += g * cache.hidden[j];
                g_hidden[j] += g * w2[o * self.hidden + j];
            }
        }
        grad_in.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.hidden {
            if cache.hidden[j] <= 0.0 {
                continue;
            }
            let g = g_hidden[j];
            grad[b1r.start + j] += g;
            let base = w1r.start + j * self.input;
            for i in 0..self.input {
                grad[base + i] += g * x[i];
                grad_in[i] += g * w1[j * self.input + i];
            }
        }
    }
}
