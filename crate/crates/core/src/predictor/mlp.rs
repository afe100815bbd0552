//! Fully connected regressor: ReLU hidden layers, identity output, MSE loss.

use rand::Rng;

use crate::matrix::Matrix;
use crate::seed::SimRng;

/// Parameters are stored flat; layer `l` holds its `out × in` weight matrix
/// (row-major) followed by its `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

fn layer_len(sizes: &[usize], l: usize) -> usize {
    sizes[l + 1] * sizes[l] + sizes[l + 1]
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut SimRng) -> Self {
        assert!(sizes.len() >= 2, "need input and output widths");
        let mut params = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for l in 0..self.num_layers() {
            off.push(off[l] + layer_len(&self.sizes, l));
        }
        off
    }

    /// Inference; dropout is never applied here.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let off = self.offsets();
        let mut a = x.to_vec();
        for l in 0..self.num_layers() {
            let (fin, fout) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off[l]..off[l] + fin * fout];
            let b = &self.params[off[l] + fin * fout..off[l + 1]];
            let last = l + 1 == self.num_layers();
            a = (0..fout)
                .map(|o| {
                    let z = b[o] + crate::matrix::dot(&w[o * fin..(o + 1) * fin], &a);
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
        }
        a
    }

    /// Mean squared error over all samples and output coordinates.
    pub fn loss(&self, inputs: &Matrix, targets: &Matrix) -> f64 {
        let mut total = 0.0;
        for (x, y) in inputs.iter_rows().zip(targets.iter_rows()) {
            let out = self.forward(x);
            total += out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
        }
        total / (inputs.rows() * targets.cols()) as f64
    }

    /// MSE and its gradient with respect to `params`.
    ///
    /// With `dropout = Some((rate, rng))`, each hidden unit is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn loss_and_grad(
        &self,
        inputs: &Matrix,
        targets: &Matrix,
        mut dropout: Option<(f64, &mut SimRng)>,
    ) -> (f64, Vec<f64>) {
        let off = self.offsets();
        let layers = self.num_layers();
        let mut grad = vec![0.0; self.params.len()];
        let n_out = (inputs.rows() * targets.cols()) as f64;
        let mut total = 0.0;

        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        let mut masks: Vec<Vec<f64>> = vec![Vec::new(); layers];
        for (x, y) in inputs.iter_rows().zip(targets.iter_rows()) {
            acts.clear();
            acts.push(x.to_vec());
            for l in 0..layers {
                let (fin, fout) = (self.sizes[l], self.sizes[l + 1]);
                let w = &self.params[off[l]..off[l] + fin * fout];
                let b = &self.params[off[l] + fin * fout..off[l + 1]];
                let prev = &acts[l];
                let mut z: Vec<f64> = (0..fout)
                    .map(|o| b[o] + crate::matrix::dot(&w[o * fin..(o + 1) * fin], prev))
                    .collect();
                if l + 1 < layers {
                    masks[l] = match dropout.as_mut() {
                        Some((rate, rng)) if *rate > 0.0 => (0..fout)
                            .map(|_| {
                                if rng.random::<f64>() < *rate {
                                    0.0
                                } else {
                                    1.0 / (1.0 - *rate)
                                }
                            })
                            .collect(),
                        _ => vec![1.0; fout],
                    };
                    for (zi, m) in z.iter_mut().zip(&masks[l]) {
                        *zi = zi.max(0.0) * m;
                    }
                }
                acts.push(z);
            }

            let out = &acts[layers];
            let mut delta: Vec<f64> = out
                .iter()
                .zip(y)
                .map(|(o, t)| {
                    total += (o - t) * (o - t);
                    2.0 * (o - t) / n_out
                })
                .collect();
            for l in (0..layers).rev() {
                let (fin, fout) = (self.sizes[l], self.sizes[l + 1]);
                let prev = &acts[l];
                let w_off = off[l];
                let b_off = off[l] + fin * fout;
                for o in 0..fout {
                    let g = delta[o];
                    if g == 0.0 {
                        continue;
                    }
                    for (gw, a) in grad[w_off + o * fin..w_off + (o + 1) * fin].iter_mut().zip(prev) {
                        *gw += g * a;
                    }
                    grad[b_off + o] += g;
                }
                if l == 0 {
                    break;
                }
                let w = &self.params[w_off..w_off + fin * fout];
                let mut back = vec![0.0; fin];
                for o in 0..fout {
                    let g = delta[o];
                    if g == 0.0 {
                        continue;
                    }
                    for (bk, wv) in back.iter_mut().zip(&w[o * fin..(o + 1) * fin]) {
                        *bk += g * wv;
                    }
                }
                // prev = relu(z) * mask; derivative is mask where the unit is active
                for ((bk, a), m) in back.iter_mut().zip(prev).zip(&masks[l - 1]) {
                    *bk = if *a > 0.0 { *bk * m } else { 0.0 };
                }
                delta = back;
            }
        }
        (total / n_out, grad)
    }
}
