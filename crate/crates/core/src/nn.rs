//! Multilayer perceptron over delay-line windows, with the exact Jacobian of
//! the output with respect to every parameter.
//!
//! The network maps a window `[y(k), ..., y(k-p)]` through a fixed input
//! transform (typically the derivative basis) and `L` weight layers; hidden
//! layers are activated, the last layer is affine with scalar output.
//! Parameters flatten in a canonical order: layer by layer, weight matrix in
//! row-major order, then the bias vector.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{delay_line, Signal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn slope_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Sigmoid => h * (1.0 - h),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::InvalidNetwork(format!("unknown activation {other:?}"))),
        }
    }
}

/// Layer sizes from input to output, e.g. `[3, 10, 10, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpShape {
    layer_sizes: Vec<usize>,
}

impl MlpShape {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidNetwork("need at least input and output layers".into()));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidNetwork("zero-width layer".into()));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidNetwork("output layer must be scalar".into()));
        }
        Ok(MlpShape { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Number of past samples each window reaches back, `input_size - 1`.
    pub fn input_delay(&self) -> usize {
        self.layer_sizes[0] - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }
}

/// Network parameters plus the frozen input transform.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    shape: MlpShape,
    activation: Activation,
    basis: DMatrix<f64>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

impl MlpParams {
    /// Seeded random initialization: weight entries drawn from a normal
    /// distribution scaled by `1/sqrt(fan_in)`, biases zero, identity input
    /// transform.
    pub fn init(shape: MlpShape, activation: Activation, seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sizes = shape.layer_sizes().to_vec();
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let scale = 1.0 / (n_in as f64).sqrt();
            // row-major draw order keeps the layout stable across versions
            let mut mat = DMatrix::zeros(n_out, n_in);
            for i in 0..n_out {
                for j in 0..n_in {
                    mat[(i, j)] = scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
            weights.push(mat);
            biases.push(DVector::zeros(n_out));
        }
        let basis = DMatrix::identity(shape.input_size(), shape.input_size());
        MlpParams { shape, activation, basis, weights, biases }
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn input_delay(&self) -> usize {
        self.shape.input_delay()
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    /// Replace the fixed input transform.
    pub fn set_basis(&mut self, basis: DMatrix<f64>) -> Result<()> {
        let n = self.shape.input_size();
        if basis.nrows() != n || basis.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "input transform must be {n}x{n}, got {}x{}",
                basis.nrows(),
                basis.ncols()
            )));
        }
        self.basis = basis;
        Ok(())
    }

    pub fn with_basis(mut self, basis: DMatrix<f64>) -> Result<Self> {
        self.set_basis(basis)?;
        Ok(self)
    }

    /// Canonical flat parameter vector.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.param_count());
        let mut at = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out[at] = w[(i, j)];
                    at += 1;
                }
            }
            for i in 0..b.len() {
                out[at] = b[i];
                at += 1;
            }
        }
        out
    }

    /// Overwrite all parameters from a canonical flat vector.
    pub fn set_flat(&mut self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch { expected: self.param_count(), got: flat.len() });
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = flat[at];
                    at += 1;
                }
            }
            for i in 0..b.len() {
                b[i] = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &DVector<f64>) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    /// Flat index of weight entry `(row, col)` of the given layer
    /// (all 0-based).
    pub fn weight_flat_index(&self, layer: usize, row: usize, col: usize) -> Result<usize> {
        let sizes = self.shape.layer_sizes();
        if layer + 1 >= sizes.len() || row >= sizes[layer + 1] || col >= sizes[layer] {
            return Err(Error::DimensionMismatch(format!(
                "no weight ({row},{col}) in layer {layer}"
            )));
        }
        let offset: usize = sizes.windows(2).take(layer).map(|w| w[1] * (w[0] + 1)).sum();
        Ok(offset + row * sizes[layer] + col)
    }

    /// Evaluate one window (length `input_size`).
    pub fn forward_window(&self, window: &[f64]) -> f64 {
        assert_eq!(window.len(), self.shape.input_size(), "window size mismatch");
        let mut h = &self.basis * DVector::from_column_slice(window);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = w * h + b;
            if l != last {
                a.apply(|x| *x = self.activation.eval(*x));
            }
            h = a;
        }
        h[0]
    }

    /// Network output along a signal, windows padded with zeros before the
    /// first sample.
    pub fn forward_signal(&self, y: &Signal) -> Signal {
        let p = self.input_delay();
        let values = (1..=y.len())
            .map(|k| {
                let w = delay_line(y, k, p).expect("index generated in range");
                self.forward_window(&w)
            })
            .collect();
        Signal::new(values, y.ts()).expect("forward pass of a valid signal is valid")
    }

    pub fn predictions(&self, y: &Signal) -> DVector<f64> {
        DVector::from_vec(self.forward_signal(y).values().to_vec())
    }

    /// Predictions together with the transposed Jacobian (`param_count` x
    /// `N`, column `k` holding the gradient of sample `k`). The transposed
    /// layout keeps per-sample writes contiguous.
    pub fn predictions_and_jacobian_t(&self, y: &Signal) -> (DVector<f64>, DMatrix<f64>) {
        let n = y.len();
        let n_phi = self.param_count();
        let p = self.input_delay();
        let last = self.weights.len() - 1;

        let mut preds = DVector::zeros(n);
        let mut jt = DMatrix::zeros(n_phi, n);

        // per-layer activations and back-propagated sensitivities, reused
        // across samples
        let sizes = self.shape.layer_sizes().to_vec();
        let mut acts: Vec<DVector<f64>> = sizes.iter().map(|&s| DVector::zeros(s)).collect();
        let mut deltas: Vec<DVector<f64>> = sizes.iter().map(|&s| DVector::zeros(s)).collect();

        for k in 1..=n {
            let window = delay_line(y, k, p).expect("index generated in range");
            self.basis.mul_to(&DVector::from_column_slice(&window), &mut acts[0]);
            for l in 0..self.weights.len() {
                let (head, tail) = acts.split_at_mut(l + 1);
                self.weights[l].mul_to(&head[l], &mut tail[0]);
                tail[0] += &self.biases[l];
                if l != last {
                    tail[0].apply(|x| *x = self.activation.eval(*x));
                }
            }
            preds[k - 1] = acts[last + 1][0];

            deltas[last + 1][0] = 1.0;
            let mut col = jt.column_mut(k - 1);
            let mut at = n_phi;
            for l in (0..self.weights.len()).rev() {
                let n_out = sizes[l + 1];
                let n_in = sizes[l];
                at -= n_out * (n_in + 1);
                let mut idx = at;
                for i in 0..n_out {
                    let di = deltas[l + 1][i];
                    for j in 0..n_in {
                        col[idx] = di * acts[l][j];
                        idx += 1;
                    }
                }
                for i in 0..n_out {
                    col[idx] = deltas[l + 1][i];
                    idx += 1;
                }
                if l > 0 {
                    let (head, tail) = deltas.split_at_mut(l + 1);
                    self.weights[l].tr_mul_to(&tail[0], &mut head[l]);
                    for i in 0..n_in {
                        head[l][i] *= self.activation.slope_from_output(acts[l][i]);
                    }
                }
            }
            debug_assert_eq!(at, 0);
        }
        (preds, jt)
    }

    /// Jacobian of the output samples with respect to the flat parameters,
    /// one row per sample.
    pub fn param_jacobian(&self, y: &Signal) -> DMatrix<f64> {
        self.predictions_and_jacobian_t(y).1.transpose()
    }

    /// Versioned human-readable parameter file; values round-trip
    /// bit-exactly.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "mlp-params v1")?;
        writeln!(w, "activation {}", self.activation.name())?;
        let sizes: Vec<String> = self.shape.layer_sizes().iter().map(|s| s.to_string()).collect();
        writeln!(w, "layers {}", sizes.join(" "))?;
        writeln!(w, "basis")?;
        for i in 0..self.basis.nrows() {
            let row: Vec<String> = (0..self.basis.ncols()).map(|j| self.basis[(i, j)].to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        let flat = self.flatten();
        writeln!(w, "params {}", flat.len())?;
        for v in flat.iter() {
            writeln!(w, "{v}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let bad = |msg: String| Error::MalformedFile { path: path.display().to_string(), msg };
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(Error::from)
        };

        if next_line()?.trim() != "mlp-params v1" {
            return Err(bad("unsupported header".into()));
        }
        let act_line = next_line()?;
        let activation = match act_line.strip_prefix("activation ") {
            Some(name) => Activation::parse(name.trim())?,
            None => return Err(bad("expected activation line".into())),
        };
        let layers_line = next_line()?;
        let sizes: Vec<usize> = match layers_line.strip_prefix("layers ") {
            Some(rest) => rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| bad(format!("bad layer size: {e}"))))
                .collect::<Result<_>>()?,
            None => return Err(bad("expected layers line".into())),
        };
        let shape = MlpShape::new(sizes)?;
        if next_line()?.trim() != "basis" {
            return Err(bad("expected basis line".into()));
        }
        let n0 = shape.input_size();
        let mut basis = DMatrix::zeros(n0, n0);
        for i in 0..n0 {
            let row = next_line()?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| bad(format!("bad basis entry: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != n0 {
                return Err(bad(format!("basis row {i} has {} entries, expected {n0}", vals.len())));
            }
            for (j, v) in vals.into_iter().enumerate() {
                basis[(i, j)] = v;
            }
        }
        let count_line = next_line()?;
        let count: usize = match count_line.strip_prefix("params ") {
            Some(rest) => rest.trim().parse().map_err(|e| bad(format!("bad param count: {e}")))?,
            None => return Err(bad("expected params line".into())),
        };
        if count != shape.param_count() {
            return Err(bad(format!(
                "parameter count {count} does not match shape ({})",
                shape.param_count()
            )));
        }
        let mut flat = DVector::zeros(count);
        for i in 0..count {
            let line = next_line()?;
            flat[i] = line.trim().parse().map_err(|e| bad(format!("bad parameter {i}: {e}")))?;
        }
        let mut params = MlpParams::init(shape, activation, 0);
        params.set_basis(basis)?;
        params.set_flat(&flat)?;
        Ok(params)
    }
}
