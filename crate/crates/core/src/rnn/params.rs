use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::gru::GruVars;

/// Architecture hyperparameters shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frame dimension D.
    pub feature_dim: usize,
    /// GRU units per direction, in both encoder and decoder.
    pub hidden_dim: usize,
    /// Embedding size; the encoder projects to twice this.
    pub latent_dim: usize,
    /// Stacked GRU layers in encoder and decoder.
    pub layers: usize,
    pub decoder_bidirectional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { feature_dim: 39, hidden_dim: 300, latent_dim: 130, layers: 2, decoder_bidirectional: true }
    }
}

impl ModelConfig {
    pub fn decoder_directions(&self) -> usize {
        if self.decoder_bidirectional {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 || self.layers == 0 {
            return Err(format!("model dimensions must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// GRU weights with gate blocks laid out as `[reset | update | candidate]`.
///
/// `w_input` is `[input_dim, 3H]`, `w_hidden` is `[H, 3H]` and `bias` is
/// `[3H]`, one bias per gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams<S> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Tensor<S>,
    pub w_hidden: Tensor<S>,
    pub bias: Tensor<S>,
}

fn uniform_matrix<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor<S> {
    Tensor::from_fn(&[rows, cols], |_| S::lit(rng.random_range(-bound..bound)))
}

impl<S: Scalar> GruCellParams<S> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w_input: Tensor::zeros(&[input_dim, 3 * hidden_dim]),
            w_hidden: Tensor::zeros(&[hidden_dim, 3 * hidden_dim]),
            bias: Tensor::zeros(&[3 * hidden_dim]),
        }
    }

    /// Uniform in ±1/√H per matrix (input then hidden), zero biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        Self {
            input_dim,
            hidden_dim,
            w_input: uniform_matrix(rng, input_dim, 3 * hidden_dim, bound),
            w_hidden: uniform_matrix(rng, hidden_dim, 3 * hidden_dim, bound),
            bias: Tensor::zeros(&[3 * hidden_dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<S>; 3] {
        [&self.w_input, &self.w_hidden, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 3] {
        let Self { w_input, w_hidden, bias, .. } = self;
        [w_input, w_hidden, bias]
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> GruVars {
        let vars = register(tape, self.tensors(), trainable);
        self.attach(tape, &mut vars.into_iter())
    }

    fn attach(&self, tape: &mut Tape<S>, vars: &mut impl Iterator<Item = Var>) -> GruVars {
        let mut next = || vars.next().expect("one handle per parameter");
        let (wi, wh, b) = (next(), next(), next());
        GruVars::new(tape, wi, wh, b, self.hidden_dim)
    }
}

/// Stacked bidirectional encoder plus the posterior projection.
///
/// `layers[l]` holds `[forward, backward]`. The projection maps the
/// concatenated final states `[2H]` to `[2 * latent_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub layers: Vec<Vec<GruCellParams<S>>>,
    pub proj_weight: Tensor<S>,
    pub proj_bias: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: Vec<Vec<GruVars>>,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub latent_dim: usize,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_dim;
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.feature_dim } else { 2 * h };
                vec![GruCellParams::zeros(input, h), GruCellParams::zeros(input, h)]
            })
            .collect();
        Self {
            layers,
            proj_weight: Tensor::zeros(&[2 * h, 2 * config.latent_dim]),
            proj_bias: Tensor::zeros(&[2 * config.latent_dim]),
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let h = config.hidden_dim;
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.feature_dim } else { 2 * h };
                (0..2).map(|_| GruCellParams::init(input, h, rng)).collect()
            })
            .collect();
        let bound = 1.0 / (h as f64).sqrt();
        Self {
            layers,
            proj_weight: uniform_matrix(rng, 2 * h, 2 * config.latent_dim, bound),
            proj_bias: Tensor::zeros(&[2 * config.latent_dim]),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.proj_bias.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0][0].input_dim
    }

    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (l, dirs) in self.layers.iter().enumerate() {
            for (d, cell) in dirs.iter().enumerate() {
                for (suffix, t) in ["w_input", "w_hidden", "bias"].iter().zip(cell.tensors()) {
                    out.push((format!("encoder.layer{l}.{}.{suffix}", DIRECTION_NAMES[d]), t));
                }
            }
        }
        out.push(("encoder.proj.weight".into(), &self.proj_weight));
        out.push(("encoder.proj.bias".into(), &self.proj_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for dirs in &mut self.layers {
            for cell in dirs {
                out.extend(cell.tensors_mut());
            }
        }
        out.push(&mut self.proj_weight);
        out.push(&mut self.proj_bias);
        out
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> EncoderVars {
        let vars = register(tape, self.named().into_iter().map(|(_, t)| t), trainable);
        self.attach(tape, &mut vars.into_iter())
    }

    fn attach(&self, tape: &mut Tape<S>, vars: &mut impl Iterator<Item = Var>) -> EncoderVars {
        let layers = self.layers.iter().map(|dirs| dirs.iter().map(|c| c.attach(tape, vars)).collect()).collect();
        let proj_weight = vars.next().expect("one handle per parameter");
        let proj_bias = vars.next().expect("one handle per parameter");
        EncoderVars { layers, proj_weight, proj_bias, latent_dim: self.latent_dim() }
    }
}

const DIRECTION_NAMES: [&str; 2] = ["fwd", "bwd"];

/// Decoder GRU stack fed the latent sample at every step, plus the output
/// projection from the last layer's per-step states to frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<S> {
    pub layers: Vec<Vec<GruCellParams<S>>>,
    pub out_weight: Tensor<S>,
    pub out_bias: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub layers: Vec<Vec<GruVars>>,
    pub out_weight: Var,
    pub out_bias: Var,
    pub feature_dim: usize,
}

impl<S: Scalar> DecoderParams<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, dirs) = (config.hidden_dim, config.decoder_directions());
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.latent_dim } else { dirs * h };
                (0..dirs).map(|_| GruCellParams::zeros(input, h)).collect()
            })
            .collect();
        Self {
            layers,
            out_weight: Tensor::zeros(&[dirs * h, config.feature_dim]),
            out_bias: Tensor::zeros(&[config.feature_dim]),
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (h, dirs) = (config.hidden_dim, config.decoder_directions());
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.latent_dim } else { dirs * h };
                (0..dirs).map(|_| GruCellParams::init(input, h, rng)).collect()
            })
            .collect();
        let bound = 1.0 / (h as f64).sqrt();
        Self {
            layers,
            out_weight: uniform_matrix(rng, dirs * h, config.feature_dim, bound),
            out_bias: Tensor::zeros(&[config.feature_dim]),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[0][0].input_dim
    }

    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (l, dirs) in self.layers.iter().enumerate() {
            for (d, cell) in dirs.iter().enumerate() {
                for (suffix, t) in ["w_input", "w_hidden", "bias"].iter().zip(cell.tensors()) {
                    out.push((format!("decoder.layer{l}.{}.{suffix}", DIRECTION_NAMES[d]), t));
                }
            }
        }
        out.push(("decoder.out.weight".into(), &self.out_weight));
        out.push(("decoder.out.bias".into(), &self.out_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for dirs in &mut self.layers {
            for cell in dirs {
                out.extend(cell.tensors_mut());
            }
        }
        out.push(&mut self.out_weight);
        out.push(&mut self.out_bias);
        out
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> DecoderVars {
        let vars = register(tape, self.named().into_iter().map(|(_, t)| t), trainable);
        self.attach(tape, &mut vars.into_iter())
    }

    fn attach(&self, tape: &mut Tape<S>, vars: &mut impl Iterator<Item = Var>) -> DecoderVars {
        let layers = self.layers.iter().map(|dirs| dirs.iter().map(|c| c.attach(tape, vars)).collect()).collect();
        let out_weight = vars.next().expect("one handle per parameter");
        let out_bias = vars.next().expect("one handle per parameter");
        DecoderVars { layers, out_weight, out_bias, feature_dim: self.out_bias.len() }
    }
}

/// Encoder and decoder parameters with their architecture.
///
/// Random initialization draws the encoder first (layer by layer, forward
/// then backward direction, input matrix then hidden matrix, then the
/// projection), followed by the decoder in the same order and finally its
/// output projection. Every matrix is filled row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<S>,
    pub decoder: DecoderParams<S>,
}

/// Handles for every model parameter on one tape, plus the flat list in
/// canonical order (matching [`Model::named_tensors`]).
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub all: Vec<Var>,
}

impl<S: Scalar> Model<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self { config: config.clone(), encoder: EncoderParams::zeros(config), decoder: DecoderParams::zeros(config) }
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(config, rng);
        let decoder = DecoderParams::init(config, rng);
        Self { config: config.clone(), encoder, decoder }
    }

    /// Parameters in canonical order with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.encoder.named();
        out.extend(self.decoder.named());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on `tape` in canonical order.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> ModelVars {
        let vars = register(tape, self.named_tensors().into_iter().map(|(_, t)| t), trainable);
        self.attach(tape, &vars)
    }

    /// Builds the model structure over handles already on `tape`, one per
    /// parameter in canonical order (e.g. leaves made by a gradient check).
    pub fn attach(&self, tape: &mut Tape<S>, vars: &[Var]) -> ModelVars {
        assert_eq!(vars.len(), self.named_tensors().len(), "one handle per parameter");
        let mut it = vars.iter().copied();
        let encoder = self.encoder.attach(tape, &mut it);
        let decoder = self.decoder.attach(tape, &mut it);
        ModelVars { encoder, decoder, all: vars.to_vec() }
    }
}

fn register<'a, S: Scalar>(tape: &mut Tape<S>, tensors: impl IntoIterator<Item = &'a Tensor<S>>, trainable: bool) -> Vec<Var> {
    tensors.into_iter().map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig { feature_dim: 4, hidden_dim: 8, latent_dim: 4, layers: 2, decoder_bidirectional: true }
    }

    #[test]
    fn default_architecture_matches_reference_sizes() {
        let c = ModelConfig::default();
        assert_eq!((c.hidden_dim, c.latent_dim, c.layers, c.feature_dim), (300, 130, 2, 39));
        let enc = EncoderParams::<f64>::zeros(&c);
        assert_eq!(enc.proj_weight.shape(), &[600, 260]);
        assert_eq!(enc.latent_dim(), 130);
    }

    #[test]
    fn names_tensors_and_vars_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::<f64>::init(&toy(), &mut rng);
        let shapes: Vec<Vec<usize>> = model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "encoder.layer0.fwd.w_input");
        assert_eq!(names.last().unwrap(), "decoder.out.bias");
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        let mut_shapes: Vec<Vec<usize>> = model.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let var_shapes: Vec<Vec<usize>> = vars.all.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(shapes, var_shapes);
    }

    #[test]
    fn init_is_bounded_with_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Model::<f64>::init(&toy(), &mut rng);
        let bound = 1.0 / (8f64).sqrt();
        for (name, t) in model.named_tensors() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|&x| x.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn unidirectional_decoder_shapes() {
        let mut c = toy();
        c.decoder_bidirectional = false;
        let d = DecoderParams::<f64>::zeros(&c);
        assert_eq!(d.layers[0].len(), 1);
        assert_eq!(d.layers[1][0].input_dim, 8);
        assert_eq!(d.out_weight.shape(), &[8, 4]);
    }
}
