//! Parameter storage and the small set of layers the models are built from.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter arrays owned by one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Replaces values from `(name, matrix)` pairs; every stored name must be
    /// present with a matching shape.
    pub fn load_named(&mut self, arrays: &[(String, Matrix)]) -> Result<(), String> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let (_, src) = arrays
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| format!("missing array `{name}`"))?;
            if src.shape() != value.shape() {
                return Err(format!(
                    "array `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                ));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, m) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// A tape bound to one parameter store.
///
/// With `trainable` set, parameters enter as differentiable leaves and their
/// gradients come back from [`Gradients::param_grads`](super::Gradients);
/// otherwise they enter as constants.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    trainable: bool,
    cache: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            cache: vec![None; store.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.param(id.0, value)
        } else {
            self.tape.constant(value)
        };
        self.cache[id.0] = Some(v);
        v
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Matrix::randn(fan_in, fan_out, std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must divide into heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, 0.5, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&outs);
        self.o.forward(g, cat)
    }
}

/// Pre-norm transformer encoder block with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 2 * dim, true, 1.0, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * dim, dim, true, 0.5, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.ff1.forward(g, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        g.add(x, h)
    }
}

/// Standard transformer sinusoidal embedding of a scalar position.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_preserves_shape_and_param_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, &mut rng);
        let x = Matrix::randn(5, 8, 1.0, &mut rng);

        let loss = |s: &ParamStore| {
            let mut g = Graph::new(s, false);
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, xv);
            let sq = g.mul(y, y);
            let m = g.mean_all(sq);
            g.scalar(m)
        };

        let mut g = Graph::new(&store, true);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, xv);
        assert_eq!(g.value(y).shape(), (5, 8));
        let sq = g.mul(y, y);
        let m = g.mean_all(sq);
        let tape = g.into_tape();
        let mut grads = tape.backward(m);
        let pg = grads.param_grads();
        assert_eq!(pg.len(), store.len());

        let h = 1e-6;
        for (id, grad) in pg.iter().take(6) {
            for i in [0, grad.len() / 2, grad.len() - 1] {
                let mut plus = store.clone();
                plus.values_mut()[*id].data_mut()[i] += h;
                let mut minus = store.clone();
                minus.values_mut()[*id].data_mut()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grad.data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn sinusoidal_embedding_shape_and_origin() {
        let e = sinusoidal_embedding(0.0, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
