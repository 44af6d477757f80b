use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Fully connected tanh network with a linear output layer. Weight matrices
/// are row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Post-activation values of every layer, input first.
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

/// `rows x cols` matrix with orthonormal rows or columns (whichever are
/// fewer), scaled by `gain`. Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    out
}

impl Mlp {
    /// Hidden layers get orthogonal weights with tanh gain 5/3; the output
    /// layer uses `out_gain` (0 gives an all-zero output layer).
    pub fn new<R: Rng>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        let n = sizes.len() - 1;
        let weights = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 5.0 / 3.0 };
                if gain == 0.0 {
                    vec![0.0; sizes[i] * sizes[i + 1]]
                } else {
                    orthogonal(sizes[i], sizes[i + 1], gain, rng)
                }
            })
            .collect();
        let biases = (0..n).map(|i| vec![0.0; sizes[i + 1]]).collect();
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            sizes: self.sizes.clone(),
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let n = self.weights.len();
        let mut acts = vec![x.to_vec()];
        for i in 0..n {
            let (din, dout) = (self.sizes[i], self.sizes[i + 1]);
            let h = &acts[i];
            let mut z = self.biases[i].clone();
            for (r, hv) in h.iter().enumerate().take(din) {
                let row = &self.weights[i][r * dout..(r + 1) * dout];
                z.iter_mut().zip(row).for_each(|(zj, wj)| *zj += hv * wj);
            }
            if i + 1 < n {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        let out = acts.pop().expect("output layer");
        (out, MlpCache { acts })
    }

    /// Accumulates parameter gradients into `grad` and returns `d/dx`.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = dout.to_vec();
        for i in (0..self.weights.len()).rev() {
            let (din, dn) = (self.sizes[i], self.sizes[i + 1]);
            let h = &cache.acts[i];
            for r in 0..din {
                let g = &mut grad.weights[i][r * dn..(r + 1) * dn];
                g.iter_mut().zip(&d).for_each(|(gv, dv)| *gv += h[r] * dv);
            }
            grad.biases[i].iter_mut().zip(&d).for_each(|(g, dv)| *g += dv);
            let mut dx = vec![0.0; din];
            for (r, dxr) in dx.iter_mut().enumerate() {
                let row = &self.weights[i][r * dn..(r + 1) * dn];
                *dxr = row.iter().zip(&d).map(|(w, dv)| w * dv).sum();
            }
            if i > 0 {
                dx.iter_mut().zip(h).for_each(|(v, hv)| *v *= 1.0 - hv * hv);
            }
            d = dx;
        }
        d
    }

    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        self.weights.iter().chain(&self.biases).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }
}
