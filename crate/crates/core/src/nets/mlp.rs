//! Fixed-architecture multilayer perceptron over flat parameter vectors.
//!
//! Layout per layer: weights as an `in x out` row-major block, then `out`
//! biases. Hidden layers use `tanh`; the output layer is linear.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::exec::{map_row_chunks, Parallelism};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Activations recorded by a forward pass; `layers[0]` is the input and the
/// last entry is the (linear) output.
#[derive(Debug, Clone)]
pub struct Tape {
    layers: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.layers.last().expect("tape has an output").view()
    }

    pub fn rows(&self) -> usize {
        self.layers[0].nrows()
    }
}

impl Mlp {
    /// `sizes` = `[input, hidden..., output]`.
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        Self { sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_views<'p>(&self, params: &'p [f64], layer: usize) -> (ArrayView2<'p, f64>, ArrayView1<'p, f64>) {
        let off = self.layer_offset(layer);
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let w = ArrayView2::from_shape((fan_in, fan_out), &params[off..off + fan_in * fan_out])
            .expect("weight block shape");
        let b = ArrayView1::from(&params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, params: &[f64], input: ArrayView2<'_, f64>) -> Tape {
        debug_assert_eq!(params.len(), self.param_count());
        assert_eq!(input.ncols(), self.input_dim(), "input width mismatch");
        let n_layers = self.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(input.to_owned());
        for l in 0..n_layers {
            let (w, b) = self.layer_views(params, l);
            let mut z = layers[l].dot(&w);
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            layers.push(z);
        }
        Tape { layers }
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, params: &[f64], tape: &Tape, d_out: ArrayView2<'_, f64>, grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        assert_eq!(d_out.dim(), tape.output().dim(), "output gradient shape");
        let mut delta = d_out.to_owned();
        for l in (0..n_layers).rev() {
            let (w, _) = self.layer_views(params, l);
            let a = &tape.layers[l];
            let dw = a.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let off = self.layer_offset(l);
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            for (g, d) in grad[off..off + fan_in * fan_out].iter_mut().zip(dw.iter()) {
                *g += d;
            }
            for (g, d) in grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
                .iter_mut()
                .zip(db.iter())
            {
                *g += d;
            }
            if l > 0 {
                let mut d_a = delta.dot(&w.t());
                d_a.zip_mut_with(a, |d, &h| *d *= 1.0 - h * h);
                delta = d_a;
            }
        }
    }

    /// Forward pass that keeps only the output, chunked for data parallelism.
    pub fn predict(&self, params: &[f64], input: ArrayView2<'_, f64>, par: Parallelism) -> Array2<f64> {
        let parts = map_row_chunks(par, input.nrows(), |r| {
            let tape = self.forward(params, input.slice(ndarray::s![r, ..]));
            tape.layers.into_iter().last().unwrap()
        });
        if parts.is_empty() {
            return Array2::zeros((0, self.output_dim()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("chunk outputs share width")
    }

    /// Runs `forward`, lets `loss_grad` turn each output chunk into an output
    /// gradient, and backpropagates. Chunk gradients are summed in order.
    pub fn forward_backward<F>(
        &self,
        params: &[f64],
        input: ArrayView2<'_, f64>,
        par: Parallelism,
        loss_grad: F,
    ) -> Vec<f64>
    where
        F: Fn(std::ops::Range<usize>, ArrayView2<'_, f64>) -> Array2<f64> + Sync + Send,
    {
        self.forward_backward_with(params, input, par, |r, out| (loss_grad(r, out), ()))
            .0
    }

    /// Like [`Mlp::forward_backward`], but the callback also returns a
    /// per-chunk side value (loss partials); those come back in chunk order.
    pub fn forward_backward_with<F, T>(
        &self,
        params: &[f64],
        input: ArrayView2<'_, f64>,
        par: Parallelism,
        loss_grad: F,
    ) -> (Vec<f64>, Vec<T>)
    where
        T: Send,
        F: Fn(std::ops::Range<usize>, ArrayView2<'_, f64>) -> (Array2<f64>, T) + Sync + Send,
    {
        let parts = map_row_chunks(par, input.nrows(), |r| {
            let tape = self.forward(params, input.slice(ndarray::s![r.clone(), ..]));
            let (d_out, side) = loss_grad(r, tape.output());
            let mut g = vec![0.0; self.param_count()];
            self.backward(params, &tape, d_out.view(), &mut g);
            (g, side)
        });
        let mut grad = vec![0.0; self.param_count()];
        let mut sides = Vec::with_capacity(parts.len());
        for (part, side) in parts {
            for (g, p) in grad.iter_mut().zip(part) {
                *g += p;
            }
            sides.push(side);
        }
        (grad, sides)
    }

    /// Orthogonal initialization with gain `hidden_gain` on hidden layers and
    /// `output_gain` on the output layer; biases zero.
    pub fn init<R: Rng>(&self, rng: &mut R, hidden_gain: f64, output_gain: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let n_layers = self.sizes.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let gain = if l + 1 == n_layers { output_gain } else { hidden_gain };
            let w = orthogonal(rng, fan_in, fan_out) * gain;
            let off = self.layer_offset(l);
            params[off..off + fan_in * fan_out].copy_from_slice(w.as_slice().unwrap());
        }
        params
    }
}

/// Random `rows x cols` matrix whose smaller dimension is orthonormal.
fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let transpose = rows < cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut m = Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal));
    // modified Gram-Schmidt on columns
    for j in 0..c {
        for k in 0..j {
            let proj = m.column(j).dot(&m.column(k));
            let col_k: Array1<f64> = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &col_k);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt().max(1e-12);
        m.column_mut(j).mapv_inplace(|x| x / norm);
    }
    if transpose {
        m.t().as_standard_layout().to_owned()
    } else {
        m
    }
}
