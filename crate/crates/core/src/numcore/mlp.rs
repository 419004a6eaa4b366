use rand::Rng;

use super::activation::Activation;
use super::error::{NumError, NumResult};
use super::matrix::Matrix;
use super::scalar::Scalar;
use super::spectral::{self, SigmaEstimate};

/// Fully connected layer computing `act(x · W + b)` with `W` stored in×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
    /// Persisted power-iteration vector (length = input dim) when spectrally normalized.
    pub sn_u: Option<Vec<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn effective_weight(&self) -> NumResult<(Matrix<T>, Option<SigmaEstimate<T>>)> {
        match &self.sn_u {
            Some(u) => {
                let est = spectral::estimate(&self.weight, u)?;
                Ok((self.weight.scale(T::one() / est.divisor()), Some(est)))
            }
            None => Ok((self.weight.clone(), None)),
        }
    }
}

/// Feedforward network. Values are immutable snapshots between optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
    spectral_norm: bool,
}

#[derive(Clone, Debug)]
struct LayerTrace<T> {
    input: Matrix<T>,
    output: Matrix<T>,
    /// Spectrally normalized weight actually used in the forward pass.
    normalized: Option<(Matrix<T>, SigmaEstimate<T>)>,
}

/// Record of one forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug, Default)]
pub struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> Option<&Matrix<T>> {
        self.layers.last().map(|l| &l.output)
    }

    /// Per-layer outputs, used to detect kink crossings in gradient checks.
    pub fn layer_outputs(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers.iter().map(|l| &l.output)
    }
}

/// Parameter gradients mirroring an [`Mlp`]'s layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Matrix<T>, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.in_dim(), l.out_dim()),
                        vec![T::zero(); l.out_dim()],
                    )
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> NumResult<()> {
        self.axpy(T::one(), other)
    }

    pub fn axpy(&mut self, s: T, other: &Self) -> NumResult<()> {
        if self.layers.len() != other.layers.len() {
            return Err(NumError::InvalidArgument(
                "gradient sets have different layer counts".into(),
            ));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.axpy(s, ow)?;
            if b.len() != ob.len() {
                return Err(NumError::ShapeMismatch {
                    op: "gradient bias",
                    left: (1, b.len()),
                    right: (1, ob.len()),
                });
            }
            for (x, &y) in b.iter_mut().zip(ob) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in &mut self.layers {
            w.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Flat views in the same order as [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.is_finite() && b.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> T {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights, zero biases. `activations[i]` follows layer `i`.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activations: &[Activation],
        spectral_norm: bool,
        rng: &mut R,
    ) -> NumResult<Self> {
        if layer_dims.len() < 2 || activations.len() != layer_dims.len() - 1 {
            return Err(NumError::InvalidArgument(format!(
                "{} layer dims need {} activations, got {}",
                layer_dims.len(),
                layer_dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if layer_dims.contains(&0) {
            return Err(NumError::InvalidArgument("zero-width layer".into()));
        }
        let layers = layer_dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = T::lit((6.0 / (fan_in + fan_out) as f64).sqrt());
                let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..=limit));
                let sn_u = spectral_norm.then(|| random_unit(fan_in, rng));
                Dense {
                    weight,
                    bias: vec![T::zero(); fan_out],
                    activation,
                    sn_u,
                }
            })
            .collect();
        Ok(Self {
            layers,
            spectral_norm,
        })
    }

    /// Hidden layers share one activation; the output layer has its own.
    pub fn with_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
        spectral_norm: bool,
        rng: &mut R,
    ) -> NumResult<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut acts = vec![hidden_act; hidden.len()];
        acts.push(output_act);
        Self::new(&dims, &acts, spectral_norm, rng)
    }

    /// Assembles a network from explicit layers (checkpoint loading, hand-built nets).
    pub fn from_layers(layers: Vec<Dense<T>>, spectral_norm: bool) -> NumResult<Self> {
        if layers.is_empty() {
            return Err(NumError::InvalidArgument("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NumError::ShapeMismatch {
                    op: "layer chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(NumError::ShapeMismatch {
                    op: "layer bias",
                    left: l.weight.shape(),
                    right: (1, l.bias.len()),
                });
            }
            match &l.sn_u {
                Some(u) if !spectral_norm || u.len() != l.in_dim() => {
                    return Err(NumError::InvalidArgument(
                        "power-iteration vector inconsistent with layer".into(),
                    ))
                }
                None if spectral_norm => {
                    return Err(NumError::InvalidArgument(
                        "spectrally normalized layer lacks its power-iteration vector".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(Self {
            layers,
            spectral_norm,
        })
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn spectral_norm(&self) -> bool {
        self.spectral_norm
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn forward(&self, x: &Matrix<T>) -> NumResult<Matrix<T>> {
        self.run(x, None)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_trace(&self, x: &Matrix<T>) -> NumResult<(Matrix<T>, Trace<T>)> {
        let mut trace = Trace {
            layers: Vec::with_capacity(self.layers.len()),
        };
        let y = self.run(x, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn run(&self, x: &Matrix<T>, mut trace: Option<&mut Trace<T>>) -> NumResult<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(NumError::ShapeMismatch {
                op: "mlp_forward input",
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let (w, est) = layer.effective_weight()?;
            let mut z = h.matmul(&w)?;
            z.add_row_vector(&layer.bias)?;
            let act = layer.activation;
            let y = z.map(|v| act.apply(v));
            if let Some(t) = trace.as_deref_mut() {
                t.layers.push(LayerTrace {
                    input: std::mem::replace(&mut h, y.clone()),
                    output: y,
                    normalized: est.map(|e| (w, e)),
                });
            } else {
                h = y;
            }
        }
        Ok(h)
    }

    fn check_trace(&self, trace: &Trace<T>, d_out: &Matrix<T>) -> NumResult<()> {
        if trace.layers.is_empty() {
            return Err(NumError::NoForwardPass);
        }
        if trace.layers.len() != self.layers.len()
            || trace
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(t, l)| t.input.cols() != l.in_dim() || t.output.cols() != l.out_dim())
        {
            return Err(NumError::InvalidArgument(
                "trace was recorded on a network with a different architecture".into(),
            ));
        }
        let out = &trace.layers[trace.layers.len() - 1].output;
        if out.shape() != d_out.shape() {
            return Err(NumError::ShapeMismatch {
                op: "mlp_backward output gradient",
                left: out.shape(),
                right: d_out.shape(),
            });
        }
        Ok(())
    }

    /// Reverse-mode pass: returns parameter gradients and `∂L/∂input` given
    /// `∂L/∂output` for the traced batch.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        d_out: &Matrix<T>,
    ) -> NumResult<(Gradients<T>, Matrix<T>)> {
        self.check_trace(trace, d_out)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let d_in = self.backprop(trace, d_out, Some(&mut grads))?;
        grads.reverse();
        Ok((Gradients { layers: grads }, d_in))
    }

    /// Input gradient only; used for frozen networks inside a loss.
    pub fn backward_input(&self, trace: &Trace<T>, d_out: &Matrix<T>) -> NumResult<Matrix<T>> {
        self.check_trace(trace, d_out)?;
        self.backprop(trace, d_out, None)
    }

    fn backprop(
        &self,
        trace: &Trace<T>,
        d_out: &Matrix<T>,
        mut grads: Option<&mut Vec<(Matrix<T>, Vec<T>)>>,
    ) -> NumResult<Matrix<T>> {
        let mut d = d_out.clone();
        for (layer, lt) in self.layers.iter().zip(&trace.layers).rev() {
            let act = layer.activation;
            let dz = d.zip_map(&lt.output, |g, y| g * act.derivative_from_output(y))?;
            let w_used = lt.normalized.as_ref().map_or(&layer.weight, |(w, _)| w);
            if let Some(g) = grads.as_deref_mut() {
                let dw_used = lt.input.matmul_tn(&dz)?;
                let dw = match &lt.normalized {
                    Some((_, est)) => est.backprop(&layer.weight, &dw_used)?,
                    None => dw_used,
                };
                g.push((dw, dz.col_sums()));
            }
            d = dz.matmul_nt(w_used)?;
        }
        Ok(d)
    }

    /// Advances every persisted power-iteration vector by one step.
    pub fn power_iterate(&mut self) -> NumResult<()> {
        for layer in &mut self.layers {
            if let Some(u) = layer.sn_u.as_mut() {
                spectral::power_step(&layer.weight, u)?;
            }
        }
        Ok(())
    }

    /// Stable fingerprint of all parameters and power-iteration vectors.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.weight
                    .as_slice()
                    .iter()
                    .chain(&l.bias)
                    .chain(l.sn_u.iter().flatten())
                    .map(|x| x.as_f64().to_bits())
            })
            .collect()
    }
}

fn random_unit<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    loop {
        let v: Vec<T> = (0..n).map(|_| rng.gen_range(-T::one()..T::one())).collect();
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > T::lit(1e-3) {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
