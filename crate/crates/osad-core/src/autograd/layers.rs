//! Layer specs: each owns its parameter names so initialization and the
//! forward graph always agree on structure.

use rand_chacha::ChaCha8Rng;

use super::{init, params::Bound, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvSpec { name: name.into(), cin, cout, k, stride, pad: k / 2, bias: true }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = self.cin * self.k * self.k;
        store.insert(
            format!("{}.w", self.name),
            init::he_normal(rng, &[self.cout, self.cin, self.k, self.k], fan_in),
        );
        if self.bias {
            store.insert(format!("{}.b", self.name), init::zeros(&[1, self.cout, 1, 1]));
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let w = bound.var(&format!("{}.w", self.name));
        let y = tape.conv2d(x, w, self.stride, self.pad);
        if self.bias {
            let b = bound.var(&format!("{}.b", self.name));
            tape.add(y, b)
        } else {
            y
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTSpec {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = self.cin * self.k * self.k;
        store.insert(
            format!("{}.w", self.name),
            init::he_normal(rng, &[self.cin, self.cout, self.k, self.k], fan_in),
        );
        store.insert(format!("{}.b", self.name), init::zeros(&[1, self.cout, 1, 1]));
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let w = bound.var(&format!("{}.w", self.name));
        let b = bound.var(&format!("{}.b", self.name));
        let y = tape.conv_t2d(x, w, self.stride, self.pad);
        tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LinearSpec {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl LinearSpec {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        LinearSpec { name: name.into(), din, dout, bias }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.w", self.name),
            init::he_normal(rng, &[self.din, self.dout], self.din),
        );
        if self.bias {
            store.insert(format!("{}.b", self.name), init::zeros(&[1, self.dout]));
        }
    }

    /// x: (n, din) -> (n, dout).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let w = bound.var(&format!("{}.w", self.name));
        let y = tape.matmul(x, w);
        if self.bias {
            let b = bound.var(&format!("{}.b", self.name));
            tape.add(y, b)
        } else {
            y
        }
    }
}
