use super::{Activation, NnError, Parametric, Result};
use crate::autodiff::{Matrix, Tape, Var};
use crate::rng::Rng;

/// Feed-forward stack of affine layers. Samples are rows, so a layer computes
/// `x W + b` with `W` stored as `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

impl Mlp {
    /// He-uniform weights, fan-in uniform biases, `hidden` activation on every
    /// layer except the last, which is linear.
    pub fn new(sizes: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes.len() - 1;
        let mut activations = vec![hidden; layers];
        activations[layers - 1] = Activation::Linear;
        let root = Rng::new(seed);
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let w_bound = (6.0 / fan_in as f64).sqrt();
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            let layer = root.child(l as u64);
            weights.push(layer.child(0).uniform_matrix(fan_in, fan_out, -w_bound, w_bound));
            biases.push(layer.child(1).uniform_matrix(1, fan_out, -b_bound, b_bound));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activations,
            weights,
            biases,
        })
    }

    /// All-zero parameters; handy for degenerate baselines and tests.
    pub fn zeros(sizes: &[usize], hidden: Activation) -> Result<Self> {
        let mut net = Self::new(sizes, hidden, 0)?;
        for p in net.parameters_mut() {
            p.fill(0.0);
        }
        Ok(net)
    }

    pub fn from_parts(
        sizes: Vec<usize>,
        activations: Vec<Activation>,
        weights: Vec<Matrix>,
        biases: Vec<Matrix>,
    ) -> Result<Self> {
        validate_sizes(&sizes)?;
        let layers = sizes.len() - 1;
        if activations.len() != layers || weights.len() != layers || biases.len() != layers {
            return Err(NnError::ParameterCount {
                expected: layers,
                got: weights.len(),
            });
        }
        for l in 0..layers {
            let expect_w = (sizes[l], sizes[l + 1]);
            let expect_b = (1, sizes[l + 1]);
            if weights[l].dim() != expect_w {
                return Err(NnError::ParameterShape {
                    index: 2 * l,
                    expected: expect_w,
                    got: weights[l].dim(),
                });
            }
            if biases[l].dim() != expect_b {
                return Err(NnError::ParameterShape {
                    index: 2 * l + 1,
                    expected: expect_b,
                    got: biases[l].dim(),
                });
            }
        }
        Ok(Self {
            sizes,
            activations,
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Matrix] {
        &mut self.biases
    }

    /// Plain evaluation, bit-identical to the tape forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut h = x.to_owned();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = h.dot(w);
            z += b;
            if *act != Activation::Linear {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Registers the parameters as tape leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
            activations: self.activations.clone(),
            input_dim: self.input_dim(),
        }
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(NnError::InvalidSizes(sizes.to_vec()));
    }
    Ok(())
}

impl Parametric for Mlp {
    fn parameters(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
    activations: Vec<Activation>,
    input_dim: usize,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let cols = x.shape().1;
        if cols != self.input_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim,
                got: cols,
            });
        }
        let mut h = x;
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            h = act.apply_var(h.dot(*w)?.add(*b)?);
        }
        Ok(h)
    }

    /// Parameter nodes in [`Parametric`] order.
    pub fn params(&self) -> Vec<Var<'t>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}
