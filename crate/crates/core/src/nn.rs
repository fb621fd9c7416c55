//! Parameter storage and the small set of layers every module is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Modules keep [`ParamId`]s; values live here so
/// that one store can be bound to many tapes.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Leaf for `id` on `tape`; repeated binds on one tape share the node.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.cached_leaf(id.0, || self.values[id.0].clone())
    }

    /// Gradients of every parameter that was bound on `tape` (zeros for the rest).
    pub fn grads_from(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.ids()
            .map(|id| match tape.cached(id.0).and_then(|v| tape.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); self.values[id.0].numel()],
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites values by name from `(name, tensor)` pairs; every stored
    /// parameter must be present with a matching shape.
    pub fn load(&mut self, entries: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, value) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| invalid("load", format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(invalid(
                    "load",
                    format!(
                        "{name}: expected {:?}, got {:?}",
                        self.values[id.0].shape(),
                        value.shape()
                    ),
                ));
            }
            self.values[id.0] = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(invalid(
                "load",
                format!("missing parameter {}", self.names[missing]),
            ));
        }
        Ok(())
    }
}

/// Seeded initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.bounded(shape, 1.0 / (fan_in as f64).sqrt())
    }

    /// He-uniform, `[-√(6/fan_in), √(6/fan_in)]`: keeps activation variance
    /// roughly constant through stacked ReLU layers.
    pub fn he_uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.bounded(shape, (6.0 / fan_in as f64).sqrt())
    }

    fn bounded<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..=bound)))
    }
}

/// 2-D convolution with bias. Kernel extents must be odd; padding keeps
/// "same" extents at stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            init.he_uniform(&[cout, cin, kernel, kernel], fan_in),
        );
        let bias = ps.add(format!("{name}.bias"), init.uniform(&[cout], fan_in));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ps.bind(tape, self.weight);
        let b = ps.bind(tape, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn zero<T: Real>(&self, ps: &mut ParamStore<T>) {
        ps.get_mut(self.weight).fill(T::zero());
        ps.get_mut(self.bias).fill(T::zero());
    }
}

/// `y = x · W (+ b)` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), init.he_uniform(&[din, dout], din));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), init.uniform(&[dout], din)));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ps.bind(tape, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ps.bind(tape, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero<T: Real>(&self, ps: &mut ParamStore<T>) {
        ps.get_mut(self.weight).fill(T::zero());
        if let Some(b) = self.bias {
            ps.get_mut(b).fill(T::zero());
        }
    }

    /// Sets the weight to the identity (square layers only) and the bias to zero.
    pub fn set_identity<T: Real>(&self, ps: &mut ParamStore<T>) {
        let w = ps.get_mut(self.weight);
        let n = w.shape()[0];
        assert_eq!(n, w.shape()[1], "identity needs a square weight");
        w.fill(T::zero());
        for i in 0..n {
            w.data_mut()[i * n + i] = T::one();
        }
        if let Some(b) = self.bias {
            ps.get_mut(b).fill(T::zero());
        }
    }
}

/// `[1, C, H, W] → [H·W, C]`: one row per spatial position, row-major over the grid.
pub fn map_to_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(invalid(
            "map_to_rows",
            format!("expected [1,C,H,W], got {s:?}"),
        ));
    }
    let flat = tape.reshape(x, &[s[1], s[2] * s[3]])?;
    tape.transpose(flat)
}

/// Inverse of [`map_to_rows`].
pub fn rows_to_map<T: Real>(tape: &mut Tape<T>, rows: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(rows).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(invalid(
            "rows_to_map",
            format!("{s:?} does not hold a {h}x{w} grid"),
        ));
    }
    let t = tape.transpose(rows)?;
    tape.reshape(t, &[1, s[1], h, w])
}
