use super::{Matrix, ParamStore};

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Debug)]
pub struct WarmupCosine {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_span as f64).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. `grads` holds `(param id, gradient)` pairs; absent
    /// parameters are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Matrix)], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut by_id: Vec<Option<&Matrix>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[*id] = Some(g);
        }
        for (id, param) in store.values_mut().iter_mut().enumerate() {
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = param.data_mut();
            let g = by_id[id];
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Rescales gradients so their global norm does not exceed `max_norm`.
pub fn clip_grad_norm(grads: &mut [(usize, Matrix)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = WarmupCosine {
            peak_lr: 1.0,
            warmup_steps: 4,
            total_steps: 14,
        };
        assert_eq!(s.lr(0), 0.25);
        assert_eq!(s.lr(3), 1.0);
        assert!((s.lr(4) - 1.0).abs() < 1e-12);
        assert!((s.lr(9) - 0.5).abs() < 1e-12);
        assert!(s.lr(14).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Matrix::row_vector(vec![3.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let g = store.values()[0].scale(2.0);
            opt.step(&mut store, &[(0, g)], 0.01);
        }
        assert!(store.values()[0].max_abs() < 1e-2);
    }
}
