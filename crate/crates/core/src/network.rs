//! Gated ("modified") multilayer perceptron.
//!
//! ```text
//! u = tanh(x W1 + b1)          v = tanh(x W2 + b2)
//! h1 = tanh(x Wh1 + bh1)
//! z_l = tanh(h_l Wl + bl)      h_{l+1} = (1 - z_l) * u + z_l * v
//! out = h_L Wout + bout
//! ```
//!
//! `hidden[0]` maps input to hidden and produces `h1`; the remaining
//! `n_layers - 1` maps are the hidden-to-hidden gates.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Jet, Scalar, Tape, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network dimension `{0}` must be positive")]
    ZeroDim(&'static str),
    #[error("input has length {got}, network expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("parameter vector has length {got}, network expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("non-finite parameter at flat index {0}")]
    NonFinite(usize),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_layers: usize,
    pub n_out: usize,
}

impl Dims {
    pub fn new(n_in: usize, n_hidden: usize, n_layers: usize, n_out: usize) -> Self {
        Dims {
            n_in,
            n_hidden,
            n_layers,
            n_out,
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        for (name, v) in [
            ("n_in", self.n_in),
            ("n_hidden", self.n_hidden),
            ("n_layers", self.n_layers),
            ("n_out", self.n_out),
        ] {
            if v == 0 {
                return Err(NetworkError::ZeroDim(name));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (i, h, l, o) = (self.n_in, self.n_hidden, self.n_layers, self.n_out);
        h * (2 * i + 2) + h * (i + 1) + (l - 1) * h * (h + 1) + o * (h + 1)
    }
}

/// Weight `w` is `fan_in x fan_out`; bias `b` is `1 x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Affine {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = glorot_bound(fan_in, fan_out);
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        Affine {
            w,
            b: Array2::zeros((1, fan_out)),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedMlpParams {
    pub dims: Dims,
    pub encoder1: Affine,
    pub encoder2: Affine,
    pub hidden: Vec<Affine>,
    pub output: Affine,
}

impl ModifiedMlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: Dims, seed: u64) -> Result<Self, NetworkError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h) = (dims.n_in, dims.n_hidden);
        let encoder1 = Affine::glorot(i, h, &mut rng);
        let encoder2 = Affine::glorot(i, h, &mut rng);
        let mut hidden = vec![Affine::glorot(i, h, &mut rng)];
        for _ in 1..dims.n_layers {
            hidden.push(Affine::glorot(h, h, &mut rng));
        }
        let output = Affine::glorot(h, dims.n_out, &mut rng);
        Ok(ModifiedMlpParams {
            dims,
            encoder1,
            encoder2,
            hidden,
            output,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        [&self.encoder1, &self.encoder2]
            .into_iter()
            .chain(self.hidden.iter())
            .chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        [&mut self.encoder1, &mut self.encoder2]
            .into_iter()
            .chain(self.hidden.iter_mut())
            .chain(std::iter::once(&mut self.output))
    }

    /// Flat parameter vector: for each layer (encoder1, encoder2, hidden...,
    /// output) the weight in row-major order, then the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.param_count());
        for layer in self.layers() {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        let expected = self.dims.param_count();
        if flat.len() != expected {
            return Err(NetworkError::ParamLength {
                expected,
                got: flat.len(),
            });
        }
        if let Some(i) = flat.iter().position(|x| !x.is_finite()) {
            return Err(NetworkError::NonFinite(i));
        }
        let mut rest = flat;
        for layer in self.layers_mut() {
            for a in [&mut layer.w, &mut layer.b] {
                let (head, tail) = rest.split_at(a.len());
                a.iter_mut().zip(head).for_each(|(x, &y)| *x = y);
                rest = tail;
            }
        }
        Ok(())
    }

    pub fn from_flat(dims: Dims, flat: &[f64]) -> Result<Self, NetworkError> {
        let mut p = Self::init(dims, 0)?;
        p.set_flat(flat)?;
        Ok(p)
    }

    /// Evaluates one input point.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        if x.len() != self.dims.n_in {
            return Err(NetworkError::InputLength {
                expected: self.dims.n_in,
                got: x.len(),
            });
        }
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        Ok(self.forward_batch(&row)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates every row of `x`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>, NetworkError> {
        if x.ncols() != self.dims.n_in {
            return Err(NetworkError::InputLength {
                expected: self.dims.n_in,
                got: x.ncols(),
            });
        }
        let u = self.encoder1.apply(x).mapv(f64::tanh);
        let v = self.encoder2.apply(x).mapv(f64::tanh);
        let diff = &v - &u;
        let mut h = self.hidden[0].apply(x).mapv(f64::tanh);
        for gate in &self.hidden[1..] {
            let z = gate.apply(&h).mapv(f64::tanh);
            h = &u + &(&z * &diff);
        }
        Ok(self.output.apply(&h))
    }

    /// Places the parameters on `tape` as differentiable leaves.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> TapeNetwork<'t> {
        let put = |a: &Affine| (tape.var(a.w.clone()), tape.var(a.b.clone()));
        TapeNetwork {
            dims: self.dims,
            encoder1: put(&self.encoder1),
            encoder2: put(&self.encoder2),
            hidden: self.hidden.iter().map(put).collect(),
            output: put(&self.output),
        }
    }

    /// Textual checkpoint: a dims header, the parameter count, then one
    /// value per line in shortest round-trip form.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), NetworkError> {
        let d = self.dims;
        let flat = self.to_flat();
        let mut s = String::with_capacity(flat.len() * 24);
        writeln!(s, "dims {} {} {} {}", d.n_in, d.n_hidden, d.n_layers, d.n_out).unwrap();
        writeln!(s, "params {}", flat.len()).unwrap();
        for x in flat {
            writeln!(s, "{x:?}").unwrap();
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, NetworkError> {
        let mut lines = r.lines();
        let mut next = || -> Result<String, NetworkError> {
            lines
                .next()
                .ok_or_else(|| NetworkError::Format("unexpected end of file".into()))?
                .map_err(NetworkError::from)
        };
        let header = next()?;
        let nums: Vec<usize> = header
            .strip_prefix("dims ")
            .ok_or_else(|| NetworkError::Format(format!("expected dims header, got `{header}`")))?
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| NetworkError::Format(format!("dims: {e}")))?;
        let [n_in, n_hidden, n_layers, n_out] = nums[..] else {
            return Err(NetworkError::Format("dims needs four values".into()));
        };
        let dims = Dims::new(n_in, n_hidden, n_layers, n_out);
        dims.validate()?;
        let count_line = next()?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| NetworkError::Format(format!("bad params line `{count_line}`")))?;
        if count != dims.param_count() {
            return Err(NetworkError::ParamLength {
                expected: dims.param_count(),
                got: count,
            });
        }
        let mut flat = Vec::with_capacity(count);
        for i in 0..count {
            let line = next()?;
            let x: f64 = line
                .trim()
                .parse()
                .map_err(|_| NetworkError::Format(format!("parameter {i}: `{line}`")))?;
            flat.push(x);
        }
        Self::from_flat(dims, &flat)
    }
}

/// Network parameters living on a tape.
pub struct TapeNetwork<'t> {
    pub dims: Dims,
    encoder1: (Var<'t>, Var<'t>),
    encoder2: (Var<'t>, Var<'t>),
    hidden: Vec<(Var<'t>, Var<'t>)>,
    output: (Var<'t>, Var<'t>),
}

impl<'t> TapeNetwork<'t> {
    fn leaves(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        [self.encoder1, self.encoder2]
            .into_iter()
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output))
            .flat_map(|(w, b)| [w, b])
    }

    /// Gradient in the same flat order as [`ModifiedMlpParams::to_flat`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.param_count());
        for leaf in self.leaves() {
            out.extend(grads.wrt(leaf).iter());
        }
        out
    }

    /// Forward pass carrying input derivatives.
    pub fn forward<const D: usize>(&self, x: Jet<Var<'t>, D>) -> Jet<Var<'t>, D> {
        let u = affine(x, self.encoder1).tanh();
        let v = affine(x, self.encoder2).tanh();
        let diff = v - u;
        let mut h = affine(x, self.hidden[0]).tanh();
        for &gate in &self.hidden[1..] {
            let z = affine(h, gate).tanh();
            h = u + z * diff;
        }
        affine(h, self.output)
    }
}

fn affine<'t, const D: usize>(x: Jet<Var<'t>, D>, (w, b): (Var<'t>, Var<'t>)) -> Jet<Var<'t>, D> {
    let mut y = x.map_linear(|s| s.matmul(w));
    y.v = y.v.add_row(b);
    y
}

/// Input jet for a batch: derivative `i` is seeded along column `dirs[i]`.
/// The second derivative, when tracked, is along `dirs[0]`.
pub fn input_jet<'t, const D: usize>(
    tape: &'t Tape,
    x: &Array2<f64>,
    dirs: [usize; D],
    track_second: bool,
) -> Jet<Var<'t>, D> {
    let shape = x.dim();
    let d = dirs.map(|col| {
        let mut e = Array2::zeros(shape);
        e.column_mut(col).fill(1.0);
        tape.constant(e)
    });
    Jet {
        v: tape.constant(x.clone()),
        d,
        dd: track_second.then(|| tape.constant(Array2::zeros(shape))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let dims = Dims::new(3, 4, 2, 5);
        let a = ModifiedMlpParams::init(dims, 7).unwrap();
        let b = ModifiedMlpParams::init(dims, 7).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_ne!(a.to_flat(), ModifiedMlpParams::init(dims, 8).unwrap().to_flat());
    }

    #[test]
    fn biases_start_at_zero() {
        let p = ModifiedMlpParams::init(Dims::new(4, 6, 3, 9), 1).unwrap();
        assert!(p.layers().all(|l| l.b.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn weights_within_glorot_bounds() {
        let p = ModifiedMlpParams::init(Dims::new(3, 64, 4, 5), 11).unwrap();
        for l in p.layers() {
            let (fan_in, fan_out) = l.w.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            assert!(l.w.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            ModifiedMlpParams::init(Dims::new(3, 0, 2, 5), 0),
            Err(NetworkError::ZeroDim("n_hidden"))
        ));
    }

    #[test]
    fn param_count_matches_flat_length() {
        for dims in [Dims::new(3, 4, 2, 5), Dims::new(5, 8, 1, 9), Dims::new(4, 16, 4, 5)] {
            let p = ModifiedMlpParams::init(dims, 3).unwrap();
            assert_eq!(p.to_flat().len(), dims.param_count());
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let dims = Dims::new(3, 4, 3, 5);
        let p = ModifiedMlpParams::from_flat(dims, &vec![0.0; dims.param_count()]).unwrap();
        assert_eq!(p.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identical_encoders_bypass_gates() {
        let mut p = ModifiedMlpParams::init(Dims::new(3, 6, 4, 2), 5).unwrap();
        p.encoder2 = p.encoder1.clone();
        let x = [0.1, 0.2, 0.3];
        let row = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
        let u = p.encoder1.apply(&row).mapv(f64::tanh);
        let expect = p.output.apply(&u);
        let got = p.forward(&x).unwrap();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn input_length_mismatch() {
        let p = ModifiedMlpParams::init(Dims::new(3, 4, 2, 5), 0).unwrap();
        assert!(matches!(
            p.forward(&[1.0, 2.0]),
            Err(NetworkError::InputLength { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn output_scales_with_head() {
        let p = ModifiedMlpParams::init(Dims::new(3, 5, 2, 4), 9).unwrap();
        let mut q = p.clone();
        q.output.w *= 3.0;
        q.output.b.fill(0.0);
        let x = [0.4, -0.2, 0.9];
        let a = p.forward(&x).unwrap();
        let b = q.forward(&x).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = ModifiedMlpParams::init(Dims::new(3, 7, 3, 5), 42).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ModifiedMlpParams::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = ModifiedMlpParams::init(Dims::new(3, 8, 3, 5), 2).unwrap();
        let x = ndarray::array![[0.1, 0.5, -0.3], [0.9, 0.0, 0.2]];
        let tape = Tape::new();
        let net = p.on_tape(&tape);
        let jet = net.forward(input_jet(&tape, &x, [2, 0], true));
        let plain = p.forward_batch(&x).unwrap();
        assert_eq!(*jet.v.value(), plain);
    }
}
