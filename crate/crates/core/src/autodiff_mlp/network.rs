use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pn_core::flat_size;
use crate::scalar::Real;

/// Fully connected layer `z = x W + b`, with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// Shape `(inputs, outputs)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform on `±1/√inputs` for weights and biases.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((inputs, outputs), |_| T::lit(rng.gen_range(-bound..bound)));
        let bias = Array1::from_shape_fn(outputs, |_| T::lit(rng.gen_range(-bound..bound)));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Three independent MLPs, one per output matrix.
    #[default]
    SeparateHeads,
    /// One hidden trunk feeding three linear output layers.
    SharedTrunk,
}

/// Sizes that determine every layer shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Retained moment order `N`.
    pub order: usize,
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub architecture: Architecture,
}

/// Index of each output head.
pub const HEAD_L: usize = 0;
pub const HEAD_LX: usize = 1;
pub const HEAD_LY: usize = 2;

impl NetworkShape {
    pub fn new(order: usize, width: usize, depth: usize) -> Self {
        Self {
            order,
            width,
            depth,
            architecture: Architecture::SeparateHeads,
        }
    }

    pub fn input_size(&self) -> usize {
        flat_size(self.order)
    }

    /// `N + 1`, the side of `H`, `M_x`, `M_y`.
    pub fn block_size(&self) -> usize {
        self.order + 1
    }

    pub fn output_sizes(&self) -> [usize; 3] {
        let n1 = self.block_size();
        [n1 * (n1 + 1) / 2, n1 * n1, n1 * n1]
    }

    fn validate(&self) -> Result<()> {
        if self.order < 1 || self.width < 1 || self.depth < 1 {
            return Err(Error::Config(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }

    fn trunk_dims(&self) -> Vec<(usize, usize)> {
        match self.architecture {
            Architecture::SeparateHeads => Vec::new(),
            Architecture::SharedTrunk => self.hidden_dims(self.input_size()),
        }
    }

    fn head_dims(&self, head: usize) -> Vec<(usize, usize)> {
        let out = self.output_sizes()[head];
        match self.architecture {
            Architecture::SeparateHeads => {
                let mut dims = self.hidden_dims(self.input_size());
                dims.push((self.width, out));
                dims
            }
            Architecture::SharedTrunk => vec![(self.width, out)],
        }
    }

    fn hidden_dims(&self, input: usize) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|k| (if k == 0 { input } else { self.width }, self.width))
            .collect()
    }
}

/// Affine input normalization `(u − mean) / scale`, fixed before training.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler<T> {
    pub mean: Array1<T>,
    pub scale: Array1<T>,
}

impl<T: Real> InputScaler<T> {
    /// Column statistics of `inputs`; near-constant columns keep unit scale.
    pub fn fit(inputs: ArrayView2<'_, T>) -> Self {
        let mean = inputs.mean_axis(Axis(0)).expect("nonempty inputs");
        let scale = inputs.std_axis(Axis(0), T::zero()).mapv(|s| {
            if s > T::lit(1e-12) {
                s
            } else {
                T::one()
            }
        });
        Self { mean, scale }
    }

    fn apply(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        (&x - &self.mean) / &self.scale
    }
}

/// Weights of the closure network: `u ↦ (L, L_x, L_y)`.
///
/// Hidden layers use `tanh`; output layers are linear. Trainable tensors are
/// ordered trunk first, then the `L`, `L_x`, `L_y` heads, each layer as
/// weight then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub shape: NetworkShape,
    pub trunk: Vec<Dense<T>>,
    pub heads: [Vec<Dense<T>>; 3],
    pub scaler: Option<InputScaler<T>>,
}

/// Raw network outputs for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput<T> {
    /// Lower triangular.
    pub l: Array2<T>,
    pub lx: Array2<T>,
    pub ly: Array2<T>,
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Network input after scaling, then each trunk activation.
    trunk_acts: Vec<Array2<T>>,
    /// Hidden activations of each head (excluding the output).
    head_acts: [Vec<Array2<T>>; 3],
    pub outputs: [Array2<T>; 3],
}

impl<T: Real> MlpParams<T> {
    fn build(shape: NetworkShape, mut make: impl FnMut(usize, usize) -> Dense<T>) -> Result<Self> {
        shape.validate()?;
        let trunk = shape.trunk_dims().into_iter().map(|(i, o)| make(i, o)).collect();
        let heads = [HEAD_L, HEAD_LX, HEAD_LY]
            .map(|h| shape.head_dims(h).into_iter().map(|(i, o)| make(i, o)).collect());
        Ok(Self {
            shape,
            trunk,
            heads,
            scaler: None,
        })
    }

    pub fn zeros(shape: NetworkShape) -> Result<Self> {
        Self::build(shape, Dense::zeros)
    }

    pub fn init<R: Rng>(shape: NetworkShape, rng: &mut R) -> Result<Self> {
        Self::build(shape, |i, o| Dense::init(i, o, rng))
    }

    /// Zeros with the same layer shapes; used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            trunk: self.trunk.iter().map(|d| Dense::zeros(d.inputs(), d.outputs())).collect(),
            heads: self
                .heads
                .clone()
                .map(|h| h.iter().map(|d| Dense::zeros(d.inputs(), d.outputs())).collect()),
            scaler: None,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.trunk.iter().chain(self.heads.iter().flatten())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.trunk.iter_mut().chain(self.heads.iter_mut().flatten())
    }

    /// Trainable tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All trainable values concatenated.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Forward pass on a batch (`rows = samples`), keeping activations.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, T>) -> Result<ForwardCache<T>> {
        if inputs.ncols() != self.shape.input_size() {
            return Err(Error::DimensionMismatch(format!(
                "network input has {} columns, expected {}",
                inputs.ncols(),
                self.shape.input_size()
            )));
        }
        let x = match &self.scaler {
            Some(s) => s.apply(inputs),
            None => inputs.to_owned(),
        };
        let mut trunk_acts = vec![x];
        for layer in &self.trunk {
            let mut z = layer.apply(trunk_acts.last().expect("input present").view());
            z.mapv_inplace(T::tanh);
            trunk_acts.push(z);
        }
        let feature = trunk_acts.last().expect("input present");
        let mut head_acts: [Vec<Array2<T>>; 3] = Default::default();
        let mut outputs: [Array2<T>; 3] = Default::default();
        for (h, head) in self.heads.iter().enumerate() {
            let (last, hidden) = head.split_last().expect("head has an output layer");
            let mut acts: Vec<Array2<T>> = Vec::with_capacity(hidden.len());
            for layer in hidden {
                let input = acts.last().unwrap_or(feature);
                let mut z = layer.apply(input.view());
                z.mapv_inplace(T::tanh);
                acts.push(z);
            }
            outputs[h] = last.apply(acts.last().unwrap_or(feature).view());
            head_acts[h] = acts;
        }
        Ok(ForwardCache {
            trunk_acts,
            head_acts,
            outputs,
        })
    }

    /// Gradient of `Σ ⟨d_outputs, outputs⟩` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, d_outputs: [Array2<T>; 3]) -> MlpParams<T> {
        let mut grad = self.zeros_like();
        let feature = cache.trunk_acts.last().expect("input present");
        let has_trunk = !self.trunk.is_empty();
        let mut d_feature: Option<Array2<T>> = None;

        for (h, d_out) in d_outputs.into_iter().enumerate() {
            let head = &self.heads[h];
            let acts = &cache.head_acts[h];
            let mut g = d_out;
            for k in (0..head.len()).rev() {
                let input = if k == 0 { feature } else { &acts[k - 1] };
                grad.heads[h][k].weight = input.t().dot(&g);
                grad.heads[h][k].bias = g.sum_axis(Axis(0));
                let needs_input_grad = k > 0 || has_trunk;
                if !needs_input_grad {
                    break;
                }
                let mut g_in = g.dot(&head[k].weight.t());
                if k > 0 {
                    tanh_backward(&mut g_in, input.view());
                    g = g_in;
                } else {
                    match &mut d_feature {
                        Some(acc) => *acc += &g_in,
                        None => d_feature = Some(g_in),
                    }
                    break;
                }
            }
        }

        if let Some(mut g) = d_feature {
            let acts = &cache.trunk_acts;
            // trunk_acts[k + 1] is the output of trunk layer k.
            tanh_backward(&mut g, acts[self.trunk.len()].view());
            for k in (0..self.trunk.len()).rev() {
                grad.trunk[k].weight = acts[k].t().dot(&g);
                grad.trunk[k].bias = g.sum_axis(Axis(0));
                if k == 0 {
                    break;
                }
                let mut g_in = g.dot(&self.trunk[k].weight.t());
                tanh_backward(&mut g_in, acts[k].view());
                g = g_in;
            }
        }
        grad
    }
}

/// `g ← g ⊙ (1 − a²)` where `a = tanh(z)`.
fn tanh_backward<T: Real>(g: &mut Array2<T>, act: ArrayView2<'_, T>) {
    g.zip_mut_with(&act, |gv, &a| *gv = *gv * (T::one() - a * a));
}

/// Unpacks one row of head outputs into `(L, L_x, L_y)`.
pub fn unpack_outputs<T: Real>(
    n1: usize,
    l_packed: ArrayView1<'_, T>,
    lx: ArrayView1<'_, T>,
    ly: ArrayView1<'_, T>,
) -> NetworkOutput<T> {
    let mut l = Array2::zeros((n1, n1));
    let mut k = 0;
    for i in 0..n1 {
        for j in 0..=i {
            l[[i, j]] = l_packed[k];
            k += 1;
        }
    }
    let square = |v: ArrayView1<'_, T>| Array2::from_shape_fn((n1, n1), |(i, j)| v[i * n1 + j]);
    NetworkOutput {
        l,
        lx: square(lx),
        ly: square(ly),
    }
}

/// Evaluates the network at a single moment vector.
pub fn mlp_forward<T: Real>(params: &MlpParams<T>, u: &[T]) -> Result<NetworkOutput<T>> {
    let x = ArrayView2::from_shape((1, u.len()), u)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let cache = params.forward_batch(x)?;
    let [l, lx, ly] = &cache.outputs;
    Ok(unpack_outputs(
        params.shape.block_size(),
        l.row(0),
        lx.row(0),
        ly.row(0),
    ))
}
