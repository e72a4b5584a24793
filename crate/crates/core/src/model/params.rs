use rand::Rng;

/// One named dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Gradient accumulators shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a zero-initialized tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, dims: &[usize]) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        let numel = dims.iter().product();
        self.params.push(Param { name, dims: dims.to_vec(), value: vec![0.0; numel] });
        self.params.len() - 1
    }

    pub fn push(&mut self, param: Param) {
        self.params.push(param);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    #[inline]
    pub fn value(&self, idx: usize) -> &[f64] {
        &self.params[idx].value
    }

    #[inline]
    pub fn value_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.params[idx].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { grads: self.params.iter().map(|p| vec![0.0; p.numel()]).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn set_all(&mut self, v: f64) {
        for p in &mut self.params {
            p.value.fill(v);
        }
    }

    /// Glorot-uniform weights; tensors whose name ends in `bias` stay zero.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        for p in &mut self.params {
            if p.name.ends_with("bias") {
                continue;
            }
            let (fan_out, fan_in) = match p.dims.as_slice() {
                [o, i] => (*o, *i),
                [n] => (*n, 1),
                _ => (p.numel(), 1),
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.value {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
}

impl Gradients {
    #[inline]
    pub fn get(&self, idx: usize) -> &[f64] {
        &self.grads[idx]
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.grads[idx]
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.grads
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales to `max_norm` when the global norm exceeds it; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }
}
