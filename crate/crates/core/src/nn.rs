//! Parameter collections and the layers built on them: linear maps,
//! embedding tables and LSTM cells.

use std::cell::RefCell;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use paragan_autograd::{kernels, Gradients, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, ordered collection of parameter tensors.
///
/// Values are reference counted so binding them onto a tape is free; the
/// optimizer writes through `Arc::make_mut`, so a tape that still holds an
/// old value never observes the update.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Clamps every entry into `[-clip, clip]`.
    pub fn clip(&mut self, clip: f64) {
        for v in &mut self.values {
            let t = Arc::make_mut(v);
            t.data_mut().iter_mut().for_each(|x| *x = x.clamp(-clip, clip));
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.data().iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Hash over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, v) in self.iter() {
            name.hash(&mut h);
            v.shape().hash(&mut h);
            for x in v.data() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Lazily records parameters on `tape` the first time each is used.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        Bound {
            tape,
            values: self.values.clone(),
            vars: RefCell::new(vec![None; self.values.len()]),
            requires_grad,
        }
    }

    /// Copies of every value, in collection order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::invalid(format!(
                "parameter {:?}: shape {:?} does not match {:?}",
                self.names[id.0],
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }
}

/// Parameters of one [`ParamSet`] as seen from a particular tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    values: Vec<Arc<Tensor>>,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    requires_grad: bool,
}

impl<'t> Bound<'t> {
    /// Wraps vars already on a tape, one per parameter in collection order.
    /// Used to differentiate a model with respect to externally supplied values.
    pub fn from_vars(tape: &'t Tape, vars: &[Var<'t>]) -> Self {
        Bound {
            tape,
            values: vars.iter().map(|v| v.value()).collect(),
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
            requires_grad: true,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.shared(self.values[id.0].clone(), self.requires_grad))
    }

    /// Per-parameter gradients in collection order; unused parameters get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        vars.iter()
            .zip(&self.values)
            .map(|(v, value)| match v {
                Some(v) => grads.wrt(*v),
                None => Tensor::zeros(value.shape()),
            })
            .collect()
    }
}

/// Seeded uniform initializer that registers parameters as it creates them.
pub struct ParamBuilder {
    set: ParamSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            set: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let s = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-s..=s)).collect();
        self.set.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.set.add(name, Tensor::full(shape, value))
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

/// `y = x W^T + b` with `W: [out, in]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim)?,
            bias: b.uniform(&format!("{name}.bias"), &[out_dim], in_dim)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul_t(&p.var(self.weight))?.add_row(&p.var(self.bias))?)
    }

    pub fn infer(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::add_row(
            &kernels::matmul_t(x, params.get(self.weight))?,
            params.get(self.bias),
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(b: &mut ParamBuilder, name: &str, vocab_size: usize, dim: usize) -> Result<Self> {
        Ok(Embedding {
            table: b.uniform(&format!("{name}.table"), &[vocab_size, dim], dim)?,
            vocab_size,
            dim,
        })
    }

    /// `[ids.len(), dim]`
    pub fn lookup<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.vocab_size,
            });
        }
        Ok(p.var(self.table).embedding(ids)?)
    }

    /// Tape-free [`Embedding::lookup`].
    pub fn infer(&self, params: &ParamSet, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.vocab_size,
            });
        }
        Ok(kernels::embedding(params.get(self.table), ids)?)
    }

    /// Tape-free [`Embedding::mean`].
    pub fn infer_mean(&self, params: &ParamSet, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        Ok(kernels::row_mean(&self.infer(params, ids)?)?)
    }

    /// Mean of the embedding rows of `ids`, as `[1, dim]`. Order-free.
    pub fn mean<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>> {
        if ids.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        Ok(self.lookup(p, ids)?.row_mean()?)
    }
}

/// Hidden and cell state, each `[1, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl<'t> LstmState<'t> {
    pub fn zeros(tape: &'t Tape, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(&[1, hidden])),
            c: tape.constant(Tensor::zeros(&[1, hidden])),
        }
    }
}

/// Gate order throughout: input, forget, output, candidate.
const GATES: [&str; 4] = ["i", "f", "o", "g"];
const FORGET: usize = 1;

/// Single-layer LSTM cell with separate per-gate weights.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Uniform fan-in init; forget-gate bias set to 1.
    pub fn new(b: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut w = Vec::with_capacity(4);
        let mut u = Vec::with_capacity(4);
        let mut bias = Vec::with_capacity(4);
        for (k, gate) in GATES.iter().enumerate() {
            w.push(b.uniform(&format!("{name}.w_{gate}"), &[hidden, input], input)?);
            u.push(b.uniform(&format!("{name}.u_{gate}"), &[hidden, hidden], hidden)?);
            bias.push(if k == FORGET {
                b.constant(&format!("{name}.b_{gate}"), &[hidden], 1.0)?
            } else {
                b.uniform(&format!("{name}.b_{gate}"), &[hidden], hidden)?
            });
        }
        Ok(LstmCell {
            w: w.try_into().unwrap(),
            u: u.try_into().unwrap(),
            b: bias.try_into().unwrap(),
            input,
            hidden,
        })
    }

    fn gate<'t>(&self, p: &Bound<'t>, k: usize, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let wx = x.matmul_t(&p.var(self.w[k]))?;
        let uh = h.matmul_t(&p.var(self.u[k]))?;
        Ok(wx.add(&uh)?.add_row(&p.var(self.b[k]))?)
    }

    pub fn step<'t>(&self, p: &Bound<'t>, x: Var<'t>, state: LstmState<'t>) -> Result<LstmState<'t>> {
        let xs = x.shape();
        if xs != [1, self.input] {
            return Err(Error::invalid(format!(
                "lstm input shape {xs:?}, expected [1, {}]",
                self.input
            )));
        }
        let i = self.gate(p, 0, x, state.h)?.sigmoid()?;
        let f = self.gate(p, 1, x, state.h)?.sigmoid()?;
        let o = self.gate(p, 2, x, state.h)?.sigmoid()?;
        let g = self.gate(p, 3, x, state.h)?.tanh()?;
        let c = f.mul(&state.c)?.add(&i.mul(&g)?)?;
        let h = o.mul(&c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    /// Tape-free step over a batch of rows; row `r` of the result equals
    /// [`LstmCell::step`] on row `r` of the inputs.
    pub fn infer(&self, params: &ParamSet, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gate = |k: usize| -> Result<Tensor> {
            let wx = kernels::matmul_t(x, params.get(self.w[k]))?;
            let uh = kernels::matmul_t(h, params.get(self.u[k]))?;
            Ok(kernels::add_row(&kernels::add(&wx, &uh)?, params.get(self.b[k]))?)
        };
        let i = kernels::sigmoid(&gate(0)?);
        let f = kernels::sigmoid(&gate(1)?);
        let o = kernels::sigmoid(&gate(2)?);
        let g = kernels::tanh(&gate(3)?);
        let c = kernels::add(&kernels::mul(&f, c)?, &kernels::mul(&i, &g)?)?;
        let h = kernels::mul(&o, &kernels::tanh(&c))?;
        Ok((h, c))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.w.iter().chain(&self.u).chain(&self.b).copied()
    }
}
