use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tape::{Gradients, Tape, Var};
use super::{dropout_mask, Optimizer, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softmax => tape.softmax(x, T::one())?,
            Activation::Identity => x,
        })
    }
}

/// One affine map followed by an activation. `weight` is (out, in), `bias` is (1, out).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Fully connected feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar = f32> {
    layers: Vec<Layer<T>>,
    dropout: Vec<f64>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub output: Var,
    /// Post-activation (and post-dropout) output of each hidden layer.
    pub hidden: Vec<Var>,
    /// `(weight, bias)` leaves in layer order.
    pub params: Vec<(Var, Var)>,
}

/// Anything holding trainable tensors in a stable order.
pub trait Parameterized<T: Scalar = f32> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

impl<T: Scalar> Mlp<T> {
    /// Builds from explicit layers after checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer<T>>, dropout: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.numel() != l.out_dim() {
                return Err(Error::shape(format!("layer {i} bias length differs from width")));
            }
        }
        if dropout.len() != layers.len() - 1 {
            return Err(Error::invalid(format!(
                "{} dropout rates for {} hidden layers",
                dropout.len(),
                layers.len() - 1
            )));
        }
        if let Some(p) = dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        Ok(Mlp { layers, dropout })
    }

    /// Uniform ±sqrt(6 / (fan_in + fan_out)) weights and zero biases.
    ///
    /// `dims` lists every width including input and output; `hidden` is the
    /// activation of every layer except the last.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("need at least input and output widths"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| T::from_f64_lossy(rng.random_range(-limit..=limit)))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_out, fan_in, w).unwrap().with_grad(),
                    bias: Tensor::matrix(1, fan_out, vec![T::zero(); fan_out])
                        .unwrap()
                        .with_grad(),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self::from_layers(layers, vec![dropout; n - 1])
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        self.dropout.iter_mut().for_each(|d| *d = p);
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Records the forward pass of `x` on `tape`.
    ///
    /// In train mode a fresh dropout mask is drawn for every sample and hidden
    /// unit; kept units are scaled by `1 / (1 - p)`.
    pub fn forward<'a, R: Rng + ?Sized>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<MlpTrace> {
        let (batch, d) = tape.shape(x);
        if d != self.in_dim() {
            return Err(Error::shape(format!(
                "input has {d} features, model expects {}",
                self.in_dim()
            )));
        }
        let mut h = x;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut params = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&layer.weight);
            let b = tape.param(&layer.bias);
            params.push((w, b));
            let z = tape.matmul_t(h, w)?;
            let z = tape.add_row(z, b)?;
            h = layer.activation.apply(tape, z)?;
            if i + 1 < self.layers.len() {
                let p = self.dropout[i];
                if train && p > 0.0 {
                    let mask: Tensor<T> = dropout_mask(batch, layer.out_dim(), p, rng)?;
                    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                    let scaled = mask.into_data().into_iter().map(|m| m * keep).collect();
                    h = tape.mask_mul(h, scaled)?;
                }
                hidden.push(h);
            }
        }
        tape.ensure_finite(h, "mlp forward")?;
        Ok(MlpTrace {
            output: h,
            hidden,
            params,
        })
    }

    /// Eval-mode outputs for a batch, without keeping a tape around.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_all(x)?.pop().unwrap())
    }

    /// Eval-mode hidden activations followed by the output.
    pub fn predict_all(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let xv = tape.input(x);
        // eval mode never draws from the generator
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let trace = self.forward(&mut tape, xv, false, &mut rng)?;
        let mut out: Vec<Tensor<T>> = trace.hidden.iter().map(|&h| tape.value(h)).collect();
        out.push(tape.value(trace.output));
        Ok(out)
    }

    /// One optimizer update: train-mode forward on `x`, the loss built by
    /// `loss`, backward, then `opt.step`. Returns the loss value.
    pub fn train_step<R, F>(&mut self, opt: &mut Optimizer<T>, x: &Tensor<T>, rng: &mut R, loss: F) -> Result<T>
    where
        R: Rng + ?Sized,
        F: for<'t> FnOnce(&mut Tape<'t, T>, &MlpTrace) -> Result<Var>,
    {
        let (value, trace, grads) = {
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let trace = self.forward(&mut tape, xv, true, rng)?;
            let l = loss(&mut tape, &trace)?;
            let value = tape.scalar(l)?;
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            let grads = tape.backward(l)?;
            (value, trace, grads)
        };
        self.zero_grad();
        self.accumulate_grads(&trace, &grads)?;
        opt.step(&mut self.params_mut())?;
        Ok(value)
    }

    /// [`train_step`](Self::train_step) with cross-entropy against integer labels.
    pub fn train_labels<R: Rng + ?Sized>(
        &mut self,
        opt: &mut Optimizer<T>,
        x: &Tensor<T>,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<T> {
        let c = self.out_dim();
        if labels.len() != x.rows() || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("labels do not match the batch or the class count"));
        }
        let mut target = vec![T::zero(); labels.len() * c];
        for (i, &l) in labels.iter().enumerate() {
            target[i * c + l] = T::one();
        }
        self.train_step(opt, x, rng, |tape, tr| tape.softmax_cross_entropy(tr.output, target, T::one()))
    }

    /// Adds the gradients of a traced pass into each parameter's buffer.
    pub fn accumulate_grads(&mut self, trace: &MlpTrace, grads: &Gradients<T>) -> Result<()> {
        if trace.params.len() != self.layers.len() {
            return Err(Error::shape("trace belongs to a different model"));
        }
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&trace.params) {
            if let Some(g) = grads.get(w) {
                layer.weight.accumulate_grad(g)?;
            }
            if let Some(g) = grads.get(b) {
                layer.bias.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
