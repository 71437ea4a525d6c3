use ndarray::{s, Zip};

use super::{NnError, Parametric, Result};
use crate::autodiff::{sigmoid, Matrix, Tape, Var};
use crate::rng::Rng;

/// Single-layer LSTM with a linear read-out.
///
/// Gate pre-activations are packed column-wise as `[input, forget, output,
/// candidate]`, each `hidden` wide:
///
/// ```text
/// z_t   = x_t Wx + s_{t-1} Wh + b
/// c_t   = σ(z_f) ⊙ c_{t-1} + σ(z_i) ⊙ tanh(z_g)
/// s_t   = σ(z_o) ⊙ tanh(c_t)
/// out_t = s_t C + c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    w_input: Matrix,
    w_hidden: Matrix,
    bias: Matrix,
    w_out: Matrix,
    b_out: Matrix,
}

impl Lstm {
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(NnError::InvalidSizes(vec![input_dim, hidden, output_dim]));
        }
        let root = Rng::new(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = root.child(2).uniform_matrix(1, 4 * hidden, -bound, bound);
        // Start with the forget gate mostly open.
        bias.slice_mut(s![.., hidden..2 * hidden]).mapv_inplace(|v| v + 1.0);
        let out_bound = (6.0 / hidden as f64).sqrt();
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            w_input: root.child(0).uniform_matrix(input_dim, 4 * hidden, -bound, bound),
            w_hidden: root.child(1).uniform_matrix(hidden, 4 * hidden, -bound, bound),
            bias,
            w_out: root.child(3).uniform_matrix(hidden, output_dim, -out_bound, out_bound),
            b_out: Matrix::zeros((1, output_dim)),
        })
    }

    pub fn from_parts(
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        params: Vec<Matrix>,
    ) -> Result<Self> {
        let expected = [
            (input_dim, 4 * hidden),
            (hidden, 4 * hidden),
            (1, 4 * hidden),
            (hidden, output_dim),
            (1, output_dim),
        ];
        if params.len() != expected.len() {
            return Err(NnError::ParameterCount {
                expected: expected.len(),
                got: params.len(),
            });
        }
        for (index, (p, e)) in params.iter().zip(expected).enumerate() {
            if p.dim() != e {
                return Err(NnError::ParameterShape {
                    index,
                    expected: e,
                    got: p.dim(),
                });
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            w_input: next(),
            w_hidden: next(),
            bias: next(),
            w_out: next(),
            b_out: next(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Plain evaluation over a sequence of `batch x input_dim` matrices,
    /// starting from zero state. Bit-identical to [`BoundLstm::forward`].
    pub fn forward(&self, sequence: &[Matrix]) -> Result<Vec<Matrix>> {
        let first = sequence.first().ok_or(NnError::EmptySequence)?;
        let batch = first.nrows();
        let h = self.hidden;
        let mut state = Matrix::zeros((batch, h));
        let mut cell = Matrix::zeros((batch, h));
        let mut outputs = Vec::with_capacity(sequence.len());
        for x in sequence {
            if x.ncols() != self.input_dim || x.nrows() != batch {
                return Err(NnError::DimensionMismatch {
                    expected: self.input_dim,
                    got: x.ncols(),
                });
            }
            let mut z = x.dot(&self.w_input) + &state.dot(&self.w_hidden);
            z += &self.bias;
            let gi = z.slice(s![.., 0..h]).mapv(sigmoid);
            let gf = z.slice(s![.., h..2 * h]).mapv(sigmoid);
            let go = z.slice(s![.., 2 * h..3 * h]).mapv(sigmoid);
            let gg = z.slice(s![.., 3 * h..4 * h]).mapv(f64::tanh);
            let kept = Zip::from(&gf).and(&cell).map_collect(|&a, &b| a * b);
            let fresh = Zip::from(&gi).and(&gg).map_collect(|&a, &b| a * b);
            cell = kept + &fresh;
            let squashed = cell.mapv(f64::tanh);
            state = Zip::from(&go).and(&squashed).map_collect(|&a, &b| a * b);
            let mut out = state.dot(&self.w_out);
            out += &self.b_out;
            outputs.push(out);
        }
        Ok(outputs)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLstm<'t> {
        BoundLstm {
            w_input: tape.leaf(self.w_input.clone()),
            w_hidden: tape.leaf(self.w_hidden.clone()),
            bias: tape.leaf(self.bias.clone()),
            w_out: tape.leaf(self.w_out.clone()),
            b_out: tape.leaf(self.b_out.clone()),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }
}

impl Parametric for Lstm {
    fn parameters(&self) -> Vec<&Matrix> {
        vec![
            &self.w_input,
            &self.w_hidden,
            &self.bias,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_input,
            &mut self.w_hidden,
            &mut self.bias,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BoundLstm<'t> {
    w_input: Var<'t>,
    w_hidden: Var<'t>,
    bias: Var<'t>,
    w_out: Var<'t>,
    b_out: Var<'t>,
    input_dim: usize,
    hidden: usize,
}

impl<'t> BoundLstm<'t> {
    pub fn params(&self) -> Vec<Var<'t>> {
        vec![self.w_input, self.w_hidden, self.bias, self.w_out, self.b_out]
    }

    pub fn forward(&self, sequence: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let first = sequence.first().ok_or(NnError::EmptySequence)?;
        let batch = first.shape().0;
        let h = self.hidden;
        let tape = first.tape();
        let mut state = tape.zeros(batch, h);
        let mut cell = tape.zeros(batch, h);
        let mut outputs = Vec::with_capacity(sequence.len());
        for x in sequence {
            let (rows, cols) = x.shape();
            if cols != self.input_dim || rows != batch {
                return Err(NnError::DimensionMismatch {
                    expected: self.input_dim,
                    got: cols,
                });
            }
            let z = x
                .dot(self.w_input)?
                .add(state.dot(self.w_hidden)?)?
                .add(self.bias)?;
            let gi = z.slice_cols(0, h)?.sigmoid();
            let gf = z.slice_cols(h, 2 * h)?.sigmoid();
            let go = z.slice_cols(2 * h, 3 * h)?.sigmoid();
            let gg = z.slice_cols(3 * h, 4 * h)?.tanh();
            cell = gf.mul(cell)?.add(gi.mul(gg)?)?;
            state = go.mul(cell.tanh())?;
            outputs.push(state.dot(self.w_out)?.add(self.b_out)?);
        }
        Ok(outputs)
    }
}
