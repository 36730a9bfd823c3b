//! Small building blocks shared by the model modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Deterministic RNG for one named parameter. Initialization never depends on
/// registration order, so toggling a module leaves every other tensor intact.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Affine map `x·W + b`, `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zero,
    /// Normal with the given standard deviation (in thousandths).
    NormalMilli(u32),
}

impl Linear {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let mut rng = param_rng(seed, &wname);
        let w = match init {
            Init::FanIn => Tensor::uniform([in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), &mut rng)?,
            Init::Zero => Tensor::zeros([in_dim, out_dim])?,
            Init::NormalMilli(m) => Tensor::randn([in_dim, out_dim], m as f64 / 1000.0, &mut rng)?,
        };
        let weight = store.register(wname, w)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros([out_dim])?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        x.linear(w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones([dim])?)?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros([dim])?)?,
            eps: LN_EPS,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.layer_norm(tape.param(store, self.gamma), tape.param(store, self.beta), self.eps)
    }
}
