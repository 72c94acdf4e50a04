use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::scalar::{lit, Scalar};

/// Dense layer view into the flat parameter vector. Weights are stored
/// input-major: `w[i * outputs + j]`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: usize,
    pub b: usize,
}

impl Layer {
    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    /// out[s] = b + x[s]·W for every sample in the batch.
    fn forward<T: Scalar>(&self, params: &[T], x: &[T], batch: usize, out: &mut Vec<T>) {
        let (ni, no) = (self.inputs, self.outputs);
        let w = &params[self.w..self.w + ni * no];
        let b = &params[self.b..self.b + no];
        out.clear();
        out.reserve(batch * no);
        for s in 0..batch {
            out.extend_from_slice(b);
            let row = &mut out[s * no..(s + 1) * no];
            for (i, &xi) in x[s * ni..(s + 1) * ni].iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                for (o, &wij) in row.iter_mut().zip(&w[i * no..(i + 1) * no]) {
                    *o += xi * wij;
                }
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient if asked.
    fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &[T],
        d_out: &[T],
        batch: usize,
        grad: &mut [T],
        want_input: bool,
    ) -> Vec<T> {
        let (ni, no) = (self.inputs, self.outputs);
        let w = &params[self.w..self.w + ni * no];
        let mut d_in = if want_input {
            vec![T::zero(); batch * ni]
        } else {
            Vec::new()
        };
        for s in 0..batch {
            let d = &d_out[s * no..(s + 1) * no];
            let xs = &x[s * ni..(s + 1) * ni];
            for (gb, &dj) in grad[self.b..self.b + no].iter_mut().zip(d) {
                *gb += dj;
            }
            for i in 0..ni {
                let xi = xs[i];
                if xi != T::zero() {
                    let gw = &mut grad[self.w + i * no..self.w + (i + 1) * no];
                    for (g, &dj) in gw.iter_mut().zip(d) {
                        *g += xi * dj;
                    }
                }
                if want_input {
                    let wi = &w[i * no..(i + 1) * no];
                    d_in[s * ni + i] = wi.iter().zip(d).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        d_in
    }
}

/// Dueling Q-network: ReLU trunk, scalar value head and per-action advantage head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNetwork<T> {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub actions: usize,
    layers: Vec<Layer>,
    pub params: Vec<T>,
}

/// Activations kept for backpropagation.
pub struct ForwardCache<T> {
    /// Trunk activations, starting with the input itself.
    trunk: Vec<Vec<T>>,
    pub q: Vec<T>,
    batch: usize,
}

impl<T: Scalar> QNetwork<T> {
    pub fn zeros(input_dim: usize, hidden: &[usize], actions: usize) -> Self {
        assert!(input_dim > 0 && actions > 0, "network needs inputs and actions");
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |inputs: usize, outputs: usize| {
            let l = Layer {
                inputs,
                outputs,
                w: offset,
                b: offset + inputs * outputs,
            };
            offset += l.len();
            layers.push(l);
        };
        let mut width = input_dim;
        for &h in hidden {
            push(width, h);
            width = h;
        }
        push(width, 1);
        push(width, actions);
        QNetwork {
            input_dim,
            hidden: hidden.to_vec(),
            actions,
            params: vec![T::zero(); offset],
            layers,
        }
    }

    /// Uniform fan-in initialization.
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], actions: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(input_dim, hidden, actions);
        for l in net.layers.clone() {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for p in &mut net.params[l.w..l.w + l.len()] {
                *p = lit(rng.random_range(-bound..bound));
            }
        }
        net
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn trunk_len(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn value_head(&self) -> Layer {
        self.layers[self.layers.len() - 2]
    }

    pub fn advantage_head(&self) -> Layer {
        self.layers[self.layers.len() - 1]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim && self.hidden == other.hidden && self.actions == other.actions
    }

    pub fn forward(&self, state: &[T]) -> Result<Vec<T>, AgentError> {
        if state.len() != self.input_dim {
            return Err(AgentError::Dimension {
                expected: self.input_dim,
                found: state.len(),
            });
        }
        Ok(self.forward_batch(state, 1).q)
    }

    /// Forward pass over `batch` row-major states.
    pub fn forward_batch(&self, states: &[T], batch: usize) -> ForwardCache<T> {
        debug_assert_eq!(states.len(), batch * self.input_dim);
        let mut trunk = Vec::with_capacity(self.trunk_len() + 1);
        trunk.push(states.to_vec());
        for l in &self.layers[..self.trunk_len()] {
            let mut out = Vec::new();
            l.forward(&self.params, trunk.last().expect("input"), batch, &mut out);
            for v in &mut out {
                *v = v.max(T::zero());
            }
            trunk.push(out);
        }
        let features = trunk.last().expect("features");
        let (mut value, mut adv) = (Vec::new(), Vec::new());
        self.value_head().forward(&self.params, features, batch, &mut value);
        self.advantage_head().forward(&self.params, features, batch, &mut adv);
        let na = self.actions;
        let inv = T::one() / lit::<T>(na as f64);
        let mut q = Vec::with_capacity(batch * na);
        for s in 0..batch {
            let a = &adv[s * na..(s + 1) * na];
            let mean = a.iter().copied().sum::<T>() * inv;
            q.extend(a.iter().map(|&x| value[s] + x - mean));
        }
        ForwardCache { trunk, q, batch }
    }

    /// Gradient of the parameters given dLoss/dQ for every sample and action.
    pub fn backward(&self, cache: &ForwardCache<T>, d_q: &[T]) -> Vec<T> {
        let batch = cache.batch;
        let na = self.actions;
        let inv = T::one() / lit::<T>(na as f64);
        let mut d_value = Vec::with_capacity(batch);
        let mut d_adv = Vec::with_capacity(batch * na);
        for s in 0..batch {
            let g = &d_q[s * na..(s + 1) * na];
            let total: T = g.iter().copied().sum();
            d_value.push(total);
            d_adv.extend(g.iter().map(|&x| x - total * inv));
        }
        let mut grad = vec![T::zero(); self.params.len()];
        let features = cache.trunk.last().expect("features");
        let has_trunk = self.trunk_len() > 0;
        let mut d_feat = self
            .value_head()
            .backward(&self.params, features, &d_value, batch, &mut grad, has_trunk);
        let d_feat_adv = self
            .advantage_head()
            .backward(&self.params, features, &d_adv, batch, &mut grad, has_trunk);
        for (a, b) in d_feat.iter_mut().zip(&d_feat_adv) {
            *a += *b;
        }
        for k in (0..self.trunk_len()).rev() {
            let out = &cache.trunk[k + 1];
            for (d, &o) in d_feat.iter_mut().zip(out) {
                if o <= T::zero() {
                    *d = T::zero();
                }
            }
            d_feat = self.layers[k].backward(&self.params, &cache.trunk[k], &d_feat, batch, &mut grad, k > 0);
        }
        grad
    }

    /// Importance-weighted mean Huber loss of Q(s, a) against targets, with its gradient.
    pub fn loss_and_grad(&self, states: &[T], actions: &[usize], targets: &[T], weights: &[T]) -> (T, Vec<T>, Vec<T>) {
        let batch = actions.len();
        let cache = self.forward_batch(states, batch);
        let na = self.actions;
        let inv_b = T::one() / lit::<T>(batch as f64);
        let mut d_q = vec![T::zero(); batch * na];
        let mut loss = T::zero();
        let mut td = Vec::with_capacity(batch);
        for s in 0..batch {
            let delta = cache.q[s * na + actions[s]] - targets[s];
            td.push(delta);
            let (l, dl) = huber(delta);
            loss += weights[s] * l * inv_b;
            d_q[s * na + actions[s]] = weights[s] * dl * inv_b;
        }
        let grad = self.backward(&cache, &d_q);
        (loss, grad, td)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Huber loss with unit threshold and its derivative.
pub fn huber<T: Scalar>(delta: T) -> (T, T) {
    let half = lit::<T>(0.5);
    if delta.abs() <= T::one() {
        (half * delta * delta, delta)
    } else {
        (delta.abs() - half, delta.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::<f64>::zeros(3, &[4], 2);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn advantage_bias_shift_leaves_q_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = QNetwork::<f64>::new(5, &[8, 8], 4, &mut rng);
        let s: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let before = net.forward(&s).unwrap();
        let head = net.advantage_head();
        for b in &mut net.params[head.b..head.b + head.outputs] {
            *b += 2.5;
        }
        let after = net.forward(&s).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dueling_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = QNetwork::<f32>::new(3, &[6], 3, &mut rng);
        let cache = net.forward_batch(&[0.1, -0.4, 0.7], 1);
        let mean: f32 = cache.q.iter().sum::<f32>() / 3.0;
        let features = cache.trunk.last().unwrap();
        let mut v = Vec::new();
        net.value_head().forward(&net.params, features, 1, &mut v);
        assert!((mean - v[0]).abs() < 1e-5);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = QNetwork::<f64>::new(4, &[7, 5], 3, &mut rng);
        let batch = 3;
        let states: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions = [0, 2, 1];
        let targets = [0.3, -0.2, 0.1];
        let weights = [1.0, 0.5, 0.8];
        let (_, grad, _) = net.loss_and_grad(&states, &actions, &targets, &weights);
        let h = 1e-5;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (k, &g) in grad.iter().enumerate() {
            let mut plus = net.clone();
            plus.params[k] += h;
            let mut minus = net.clone();
            minus.params[k] -= h;
            let fd = (plus.loss_and_grad(&states, &actions, &targets, &weights).0
                - minus.loss_and_grad(&states, &actions, &targets, &weights).0)
                / (2.0 * h);
            num += (fd - g).powi(2);
            den += fd.abs().max(g.abs()).powi(2);
        }
        assert!(num.sqrt() / den.sqrt() < 1e-6);
    }
}
