use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::scalar::Scalar;

use super::params::GruCellParams;

/// A GRU cell's parameters registered on a tape.
///
/// The hidden-to-hidden matrix is pre-split into its reset/update block
/// and its candidate block, since the candidate multiplies `r ⊙ h`.
#[derive(Debug, Clone)]
pub struct GruVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    w_hidden_gates: Var,
    w_hidden_candidate: Var,
    pub hidden_dim: usize,
}

impl GruVars {
    pub(crate) fn new<S: Scalar>(tape: &mut Tape<S>, w_input: Var, w_hidden: Var, bias: Var, hidden_dim: usize) -> Self {
        let h = hidden_dim;
        let w_hidden_gates = tape.slice(w_hidden, 1, 0, 2 * h).expect("w_hidden is [H, 3H]");
        let w_hidden_candidate = tape.slice(w_hidden, 1, 2 * h, h).expect("w_hidden is [H, 3H]");
        Self { w_input, w_hidden, bias, w_hidden_gates, w_hidden_candidate, hidden_dim }
    }

    /// `x W + b` for a batch of inputs `x: [rows, input_dim]`.
    pub fn project_input<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var, TapeError> {
        let xw = tape.matmul(x, self.w_input)?;
        tape.add_row(xw, self.bias)
    }

    /// One GRU update given the projected input `xw: [B, 3H]`.
    ///
    /// ```text
    /// r  = σ(W_r x + U_r h + b_r)
    /// u  = σ(W_u x + U_u h + b_u)
    /// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
    /// h' = (1 − u) ⊙ h + u ⊙ h̃
    /// ```
    pub fn step_projected<S: Scalar>(&self, tape: &mut Tape<S>, xw: Var, h: Var) -> Result<Var, TapeError> {
        let n = self.hidden_dim;
        let x_gates = tape.slice(xw, 1, 0, 2 * n)?;
        let x_cand = tape.slice(xw, 1, 2 * n, n)?;
        let h_gates = tape.matmul(h, self.w_hidden_gates)?;
        let pre = tape.add(x_gates, h_gates)?;
        let gates = tape.sigmoid(pre);
        let reset = tape.slice(gates, 1, 0, n)?;
        let update = tape.slice(gates, 1, n, n)?;
        let rh = tape.mul(reset, h)?;
        let h_cand_part = tape.matmul(rh, self.w_hidden_candidate)?;
        let cand_pre = tape.add(x_cand, h_cand_part)?;
        let cand = tape.tanh(cand_pre);
        let delta = tape.sub(cand, h)?;
        let moved = tape.mul(update, delta)?;
        tape.add(h, moved)
    }

    pub fn step<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, h: Var) -> Result<Var, TapeError> {
        let xw = self.project_input(tape, x)?;
        self.step_projected(tape, xw, h)
    }
}

/// Where a recurrence gets its per-step projected input.
pub(crate) enum StepInputs<'a> {
    /// A different `[active_t, 3H]` projection per step.
    PerStep(&'a [Var]),
    /// One `[B, 3H]` projection whose leading rows feed every step (the
    /// decoder's latent input).
    Shared(Var),
}

/// Runs one direction of a GRU over a length-sorted batch and returns the
/// state after every step, indexed by time.
///
/// `active[t]` rows (a prefix, since rows are sorted by decreasing length)
/// are inside their sequence at step `t`, and only those rows are updated.
/// Running in reverse, a row's recurrence starts from zero at its own last
/// frame.
pub(crate) fn run_direction<S: Scalar>(tape: &mut Tape<S>, cell: &GruVars, inputs: StepInputs<'_>, active: &[usize], reverse: bool) -> Result<Vec<Var>, TapeError> {
    let steps = active.len();
    let hd = cell.hidden_dim;
    let mut states: Vec<Option<Var>> = vec![None; steps];
    let mut h: Option<Var> = None;
    let mut shared: Option<(usize, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
    for t in order {
        let n = active[t];
        let prev = match h {
            None => tape.constant(Tensor::zeros(&[n, hd])),
            Some(h) => {
                let have = tape.shape(h)[0];
                if have > n {
                    tape.slice(h, 0, 0, n)?
                } else if have < n {
                    let fresh = tape.constant(Tensor::zeros(&[n - have, hd]));
                    tape.concat(&[h, fresh], 0)?
                } else {
                    h
                }
            }
        };
        let xw = match inputs {
            StepInputs::PerStep(xs) => xs[t],
            StepInputs::Shared(x) => match shared {
                Some((rows, v)) if rows == n => v,
                _ => {
                    let v = if tape.shape(x)[0] == n { x } else { tape.slice(x, 0, 0, n)? };
                    shared = Some((n, v));
                    v
                }
            },
        };
        let next = cell.step_projected(tape, xw, prev)?;
        states[t] = Some(next);
        h = Some(next);
    }
    Ok(states.into_iter().map(|s| s.expect("every step visited")).collect())
}

/// Single GRU update for one input vector, without gradients.
pub fn gru_cell_step<S: Scalar>(params: &GruCellParams<S>, x: &[S], h_prev: &[S]) -> Result<Vec<S>, TapeError> {
    if x.len() != params.input_dim || h_prev.len() != params.hidden_dim {
        return Err(TapeError::ShapeMismatch {
            op: "gru_cell_step",
            left: vec![params.input_dim, params.hidden_dim],
            right: vec![x.len(), h_prev.len()],
        });
    }
    let mut tape = Tape::new();
    let cell = params.bind(&mut tape, false);
    let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let hv = tape.constant(Tensor::new(vec![1, h_prev.len()], h_prev.to_vec())?);
    let out = cell.step(&mut tape, xv, hv)?;
    Ok(tape.value(out).data().to_vec())
}
