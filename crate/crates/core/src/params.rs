//! Parameter storage shared by the encoders, the decoder and the probe.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tape::{Mat, Tape, Var};

/// A block of trainable matrices with a fixed enumeration order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Mat>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn bind_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Draws initial weights from `N(0, scale²)`.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    scale: f64,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, scale: f64) -> Self {
        Init { rng, scale }
    }

    pub fn mat(&mut self, rows: usize, cols: usize) -> Mat {
        let scale = self.scale;
        Mat::from_shape_fn((rows, cols), |_| {
            let z: f64 = self.rng.sample(StandardNormal);
            z * scale
        })
    }
}

/// Affine layer `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Mat,
    pub b: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn new(init: &mut Init, input: usize, output: usize) -> Self {
        Dense {
            w: init.mat(input, output),
            b: init.mat(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Mat::zeros((input, output)),
            b: Mat::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn tensors(&self) -> [&Mat; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn bound(vars: &mut impl Iterator<Item = Var>) -> BoundDense {
        BoundDense {
            w: vars.next().expect("dense weight"),
            b: vars.next().expect("dense bias"),
        }
    }

    /// Value-level forward pass.
    pub fn apply(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.b
    }
}

impl BoundDense {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.w);
        tape.add_row(xw, self.b)
    }
}
