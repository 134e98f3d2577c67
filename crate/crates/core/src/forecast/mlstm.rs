//! Multiplicative LSTM for scalar time series.
//!
//! One recurrent layer over a scalar input: the hidden state from the
//! previous step is mixed multiplicatively with the current input
//! before feeding the gates, and a linear head maps the final hidden
//! state to the predicted next value. Parameters live in one flat
//! vector so the optimizer and checkpointing stay trivial; gradients
//! come from full backpropagation through time and are verified against
//! finite differences in the tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Gate order in the parameter layout: input, forget, output, candidate.
const GATES: usize = 4;

/// Training hyperparameters for one series model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 32,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

/// Offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w_mx: usize,
    w_mh: usize,
    gate_wx: [usize; GATES],
    gate_wm: [usize; GATES],
    gate_b: [usize; GATES],
    w_y: usize,
    b_y: usize,
    total: usize,
}

impl Layout {
    fn new(h: usize) -> Self {
        let mut off = 0;
        let w_mx = off;
        off += h;
        let w_mh = off;
        off += h * h;
        let mut gate_wx = [0; GATES];
        let mut gate_wm = [0; GATES];
        let mut gate_b = [0; GATES];
        for g in 0..GATES {
            gate_wx[g] = off;
            off += h;
            gate_wm[g] = off;
            off += h * h;
            gate_b[g] = off;
            off += h;
        }
        let w_y = off;
        off += h;
        let b_y = off;
        off += 1;
        Layout {
            w_mx,
            w_mh,
            gate_wx,
            gate_wm,
            gate_b,
            w_y,
            b_y,
            total: off,
        }
    }
}

/// One step's intermediate values, kept for backpropagation.
struct StepCache {
    x: f64,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    mix_in: Vec<f64>,
    mix_rec: Vec<f64>,
    m: Vec<f64>,
    gates: [Vec<f64>; GATES],
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlstm {
    hidden: usize,
    params: Vec<f64>,
}

impl Mlstm {
    pub fn new(hidden: usize, seed: u64) -> Self {
        assert!(hidden > 0, "hidden size must be positive");
        let layout = Layout::new(hidden);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut params: Vec<f64> = (0..layout.total)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        // Forget-gate bias starts positive so memory persists early on.
        for j in 0..hidden {
            params[layout.gate_b[1] + j] = 1.0;
        }
        Mlstm { hidden, params }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn from_params(hidden: usize, params: Vec<f64>) -> Option<Self> {
        if Layout::new(hidden).total != params.len() {
            return None;
        }
        Some(Mlstm { hidden, params })
    }

    /// Predicted next value after consuming `xs` left to right.
    pub fn predict(&self, xs: &[f64]) -> f64 {
        let (y, _) = self.forward(xs, false);
        y
    }

    fn forward(&self, xs: &[f64], keep_caches: bool) -> (f64, Vec<StepCache>) {
        let l = Layout::new(self.hidden);
        let h = self.hidden;
        let p = &self.params;
        let mut h_state = vec![0.0; h];
        let mut c_state = vec![0.0; h];
        let mut caches = Vec::with_capacity(if keep_caches { xs.len() } else { 0 });

        for &x in xs {
            let mut mix_in = vec![0.0; h];
            let mut mix_rec = vec![0.0; h];
            let mut m = vec![0.0; h];
            for j in 0..h {
                mix_in[j] = p[l.w_mx + j] * x;
                let mut acc = 0.0;
                let row = l.w_mh + j * h;
                for k in 0..h {
                    acc += p[row + k] * h_state[k];
                }
                mix_rec[j] = acc;
                m[j] = mix_in[j] * mix_rec[j];
            }
            let mut gates: [Vec<f64>; GATES] = std::array::from_fn(|_| vec![0.0; h]);
            for g in 0..GATES {
                for j in 0..h {
                    let mut acc = p[l.gate_wx[g] + j] * x + p[l.gate_b[g] + j];
                    let row = l.gate_wm[g] + j * h;
                    for k in 0..h {
                        acc += p[row + k] * m[k];
                    }
                    gates[g][j] = if g == 3 { acc.tanh() } else { sigmoid(acc) };
                }
            }
            let mut c_new = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            for j in 0..h {
                c_new[j] = gates[1][j] * c_state[j] + gates[0][j] * gates[3][j];
                tanh_c[j] = c_new[j].tanh();
                h_new[j] = gates[2][j] * tanh_c[j];
            }
            if keep_caches {
                caches.push(StepCache {
                    x,
                    h_prev: h_state.clone(),
                    c_prev: c_state.clone(),
                    mix_in,
                    mix_rec,
                    m,
                    gates: gates.clone(),
                    tanh_c: tanh_c.clone(),
                    h: h_new.clone(),
                });
            }
            h_state = h_new;
            c_state = c_new;
        }

        let mut y = p[l.b_y];
        for j in 0..h {
            y += p[l.w_y + j] * h_state[j];
        }
        (y, caches)
    }

    /// Squared-error gradient for one sequence, accumulated into `grads`.
    /// Returns the loss term `(y - target)^2`.
    fn accumulate_gradient(&self, xs: &[f64], target: f64, grads: &mut [f64]) -> f64 {
        let l = Layout::new(self.hidden);
        let h = self.hidden;
        let p = &self.params;
        let (y, caches) = self.forward(xs, true);
        let loss = (y - target) * (y - target);
        let dy = 2.0 * (y - target);

        grads[l.b_y] += dy;
        let last_h = caches
            .last()
            .map(|c| c.h.clone())
            .unwrap_or_else(|| vec![0.0; h]);
        for j in 0..h {
            grads[l.w_y + j] += dy * last_h[j];
        }

        let mut dh: Vec<f64> = (0..h).map(|j| dy * p[l.w_y + j]).collect();
        let mut dc = vec![0.0; h];

        for cache in caches.iter().rev() {
            let (gi, gf, go, gg) = (
                &cache.gates[0],
                &cache.gates[1],
                &cache.gates[2],
                &cache.gates[3],
            );
            let mut gate_pre: [Vec<f64>; GATES] = std::array::from_fn(|_| vec![0.0; h]);
            for j in 0..h {
                dc[j] += dh[j] * go[j] * (1.0 - cache.tanh_c[j] * cache.tanh_c[j]);
                gate_pre[2][j] = dh[j] * cache.tanh_c[j] * go[j] * (1.0 - go[j]);
                gate_pre[0][j] = dc[j] * gg[j] * gi[j] * (1.0 - gi[j]);
                gate_pre[1][j] = dc[j] * cache.c_prev[j] * gf[j] * (1.0 - gf[j]);
                gate_pre[3][j] = dc[j] * gi[j] * (1.0 - gg[j] * gg[j]);
            }

            let mut dm = vec![0.0; h];
            for g in 0..GATES {
                for j in 0..h {
                    let dpre = gate_pre[g][j];
                    grads[l.gate_wx[g] + j] += dpre * cache.x;
                    grads[l.gate_b[g] + j] += dpre;
                    let row = l.gate_wm[g] + j * h;
                    for k in 0..h {
                        grads[row + k] += dpre * cache.m[k];
                        dm[k] += p[row + k] * dpre;
                    }
                }
            }

            let mut dh_prev = vec![0.0; h];
            for j in 0..h {
                let da = dm[j] * cache.mix_rec[j];
                let db = dm[j] * cache.mix_in[j];
                grads[l.w_mx + j] += da * cache.x;
                let row = l.w_mh + j * h;
                for k in 0..h {
                    grads[row + k] += db * cache.h_prev[k];
                    dh_prev[k] += p[row + k] * db;
                }
            }

            for j in 0..h {
                dc[j] *= gf[j];
            }
            dh = dh_prev;
        }
        loss
    }

    /// Trains on `(window, next)` pairs with mini-batch Adam. Returns the
    /// mean loss per epoch. Fully deterministic for a given config.
    pub fn train(&mut self, pairs: &[(Vec<f64>, f64)], cfg: &TrainConfig) -> Vec<f64> {
        if pairs.is_empty() || cfg.epochs == 0 {
            return Vec::new();
        }
        let l = Layout::new(self.hidden);
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        let mut m1 = vec![0.0; l.total];
        let mut m2 = vec![0.0; l.total];
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut step = 0usize;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let batch = cfg.batch_size.max(1);
        let mut losses = Vec::with_capacity(cfg.epochs);

        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let mut grads = vec![0.0; l.total];
                for &idx in chunk {
                    let (ref xs, target) = pairs[idx];
                    epoch_loss += self.accumulate_gradient(xs, target, &mut grads);
                }
                let scale = 1.0 / chunk.len() as f64;
                for g in grads.iter_mut() {
                    *g *= scale;
                }
                if cfg.grad_clip > 0.0 {
                    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > cfg.grad_clip {
                        let s = cfg.grad_clip / norm;
                        for g in grads.iter_mut() {
                            *g *= s;
                        }
                    }
                }
                step += 1;
                let bias1 = 1.0 - beta1.powi(step as i32);
                let bias2 = 1.0 - beta2.powi(step as i32);
                for i in 0..l.total {
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * grads[i];
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * grads[i] * grads[i];
                    let m_hat = m1[i] / bias1;
                    let v_hat = m2[i] / bias2;
                    self.params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
            losses.push(epoch_loss / pairs.len() as f64);
        }
        losses
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fisher-Yates with the library's seeded generator, so training order
/// does not depend on external shuffle implementations.
fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
