//! Parameter storage and the small layer vocabulary used by the models:
//! linear, MLP, affine group norm, and the Adam optimizer.
//!
//! Parameters live in a flat name → tensor map so checkpoints, freezing and
//! optimizer state all key off stable names. Layer structs are lightweight
//! descriptors; `init` materializes parameters into a [`ParamStore`] and
//! `fwd` binds them onto a tape through a [`Binder`].

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Negative slope shared by every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Named parameter tensors, ordered deterministically by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.entries.insert(name.to_string(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.data().len()).sum()
    }

    /// Round every value to the nearest f32. Keeping the live state exactly
    /// f32-representable makes the float32 checkpoint round-trip lossless,
    /// which is what makes training resume bit-exact.
    pub fn quantize_f32(&mut self) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Binds parameters from a store onto a tape, once per name. Parameters whose
/// name starts with a frozen prefix are bound as constants and receive no
/// gradient.
pub struct Binder<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    frozen_prefixes: Vec<String>,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            frozen_prefixes: Vec::new(),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Bind everything as constants (inference).
    pub fn frozen(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self::with_frozen_prefixes(tape, store, vec![String::new()])
    }

    pub fn with_frozen_prefixes(
        tape: &'a Tape,
        store: &'a ParamStore,
        frozen_prefixes: Vec<String>,
    ) -> Self {
        Self {
            tape,
            store,
            frozen_prefixes,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let tensor = self.store.get(name).clone();
        let frozen = self
            .frozen_prefixes
            .iter()
            .any(|p| name.starts_with(p.as_str()));
        let var = if frozen {
            self.tape.constant(tensor)
        } else {
            self.tape.leaf(tensor)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Pull gradients for every bound trainable parameter.
    pub fn parameter_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &var) in self.bound.borrow().iter() {
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect(),
    )
}

/// Fully connected layer, `x (N×din) → x·W + b (N×dout)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
            zero_init: false,
        }
    }

    pub fn zeroed(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
            zero_init: true,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let w = if self.zero_init {
            Tensor::zeros(self.din, self.dout)
        } else {
            let limit = (6.0 / self.din as f64).sqrt();
            init_uniform(rng, self.din, self.dout, limit)
        };
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(1, self.dout));
    }

    pub fn fwd(&self, b: &Binder, x: Var) -> Var {
        let w = b.param(&format!("{}.w", self.name));
        let bias = b.param(&format!("{}.b", self.name));
        let h = b.tape().matmul(x, w);
        b.tape().add_bias_row(h, bias)
    }
}

/// Stack of linear layers with LeakyReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: impl Into<String>, dims: &[usize]) -> Self {
        let name = name.into();
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(format!("{name}.{i}"), dims[i], dims[i + 1]))
            .collect();
        Self { layers }
    }

    /// Same as [`Mlp::new`] but the final layer starts at zero.
    pub fn zero_last(mut self) -> Self {
        self.layers.last_mut().unwrap().zero_init = true;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn fwd(&self, b: &Binder, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.fwd(b, h);
            if i + 1 < self.layers.len() {
                h = b.tape().leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().dout
    }
}

/// Group normalization with learnable per-channel gain and shift.
/// `groups = 1` is layer norm.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0);
        Self {
            name: name.into(),
            channels,
            groups,
        }
    }

    pub fn init(&self, store: &mut ParamStore, _rng: &mut ChaCha8Rng) {
        store.insert(
            &format!("{}.gamma", self.name),
            Tensor::filled(1, self.channels, 1.0),
        );
        store.insert(
            &format!("{}.beta", self.name),
            Tensor::zeros(1, self.channels),
        );
    }

    pub fn fwd(&self, b: &Binder, x: Var) -> Var {
        let normed = b.tape().group_norm(x, self.groups, 1e-5);
        let gamma = b.param(&format!("{}.gamma", self.name));
        let beta = b.param(&format!("{}.beta", self.name));
        let scaled = b.tape().mul_bias_row(normed, gamma);
        b.tape().add_bias_row(scaled, beta)
    }
}

/// Adam with cosine learning-rate decay handled by the caller (pass the
/// current `lr` to [`Adam::step`]). Moments are quantized to f32 together
/// with the parameters after each step so a saved checkpoint resumes
/// bit-exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for i in 0..g.data().len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] -= update;
            }
        }
        store.quantize_f32();
        for t in self.m.values_mut().chain(self.v.values_mut()) {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Cosine decay from `lr0` to `lr0 * floor_frac` over `total` steps.
pub fn cosine_lr(lr0: f64, step: u64, total: u64, floor_frac: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total)) as f64 / total as f64;
    let floor = lr0 * floor_frac;
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_forward_matches_manual() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new("l", 2, 2);
        lin.init(&mut store, &mut rng);
        let w = store.get("l.w").clone();

        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let x = tape.constant(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let y = lin.fwd(&b, x);
        let v = tape.value(y);
        let want0 = w.get(0, 0) + 2.0 * w.get(1, 0);
        let want1 = w.get(0, 1) + 2.0 * w.get(1, 1);
        assert!((v.get(0, 0) - want0).abs() < 1e-12);
        assert!((v.get(0, 1) - want1).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(1, 1, vec![3.0]));
        let mut adam = Adam::new();
        for _ in 0..400 {
            let x = store.get("x").item();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * x));
            adam.step(&mut store, &grads, 0.05);
        }
        assert!(store.get("x").item().abs() < 0.05);
    }

    #[test]
    fn quantize_round_trips_through_f32() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::from_vec(1, 2, vec![0.1, 1.0 / 3.0]));
        store.quantize_f32();
        let v = store.get("p").data().to_vec();
        assert_eq!(v[0], 0.1f32 as f64);
        assert_eq!(v[1], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn frozen_prefix_gets_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Linear::new("backbone.enc", 2, 2);
        let head = Linear::new("head.out", 2, 1);
        enc.init(&mut store, &mut rng);
        head.init(&mut store, &mut rng);

        let tape = Tape::new();
        let b = Binder::with_frozen_prefixes(&tape, &store, vec!["backbone.".into()]);
        let x = tape.constant(Tensor::from_vec(1, 2, vec![0.5, -0.3]));
        let h = enc.fwd(&b, x);
        let y = head.fwd(&b, h);
        let loss = tape.sum_all(y);
        let mut grads = tape.backward(loss);
        let collected = b.parameter_grads(&mut grads);
        assert!(collected.contains_key("head.out.w"));
        assert!(!collected.keys().any(|k| k.starts_with("backbone.")));
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert!((cosine_lr(1e-3, 0, 100, 0.1) - 1e-3).abs() < 1e-12);
        assert!((cosine_lr(1e-3, 100, 100, 0.1) - 1e-4).abs() < 1e-12);
    }
}
