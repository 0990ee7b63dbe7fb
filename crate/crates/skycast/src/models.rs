//! The four forecast architectures and their losses.
//!
//! All models predict the change Δq̂ of normalized log power between the
//! current step and the forecast horizon. The network's sigmoid output
//! σ ∈ (0,1) is remapped affinely to Δq̂ = 2σ − 1 ∈ (−1,1) so variations
//! can be negative; a zero-initialized output layer therefore predicts
//! Δq̂ = 0, which reproduces the persistence baseline exactly.
//!
//! - MLP: power history only, a 64×64×1 dense stack.
//! - CNN: a shared image encoder per timestep; latents are concatenated
//!   with the 64-d power latent and fed to a 1024×1024×1024×1 predictor.
//! - LSTM: like CNN, but the per-step latents run through a 2-layer LSTM
//!   and only its final output joins the power latent.
//! - LSTM-Full: LSTM plus auxiliary heads (per-step power and sun
//!   regressors, per-step image reconstruction, and sequence-level sun
//!   and sky-intensity variation predictors) trained with a weighted
//!   multi-task loss.

use crate::layers::{
    bind_all, ImageDecoder, ImageEncoder, LstmStack, MlpStack, Mode, Param, Visit,
};
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LATENT_DIM: usize = crate::layers::encoder::LATENT_DIM;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model requires sky images but the sample provides none")]
    MissingImages,
    #[error("multitask loss missing target for task `{0}`")]
    MissingTarget(&'static str),
    #[error("unknown model kind `{0}` (expected mlp|cnn|lstm|lstm_full)")]
    UnknownKind(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
    Lstm,
    LstmFull,
}

impl ModelKind {
    pub fn uses_images(self) -> bool {
        !matches!(self, ModelKind::Mlp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
            ModelKind::LstmFull => "lstm_full",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "cnn" => Ok(ModelKind::Cnn),
            "lstm" => Ok(ModelKind::Lstm),
            "lstm_full" | "lstm-full" => Ok(ModelKind::LstmFull),
            other => Err(ModelError::UnknownKind(other.into())),
        }
    }
}

/// Scale factors of the combined multi-task objective
/// L = L_Δp + λ_Δθ·L_Δθ + λ_Δs·L_Δs + λ_p·L_p + λ_θ·L_θ + λ_I·L_I.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta_theta: f64,
    pub delta_s: f64,
    pub power: f64,
    pub theta: f64,
    pub image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            delta_theta: 1e3,
            delta_s: 1e-3,
            power: 0.1,
            theta: 0.1,
            image: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            delta_theta: 0.0,
            delta_s: 0.0,
            power: 0.0,
            theta: 0.0,
            image: 0.0,
        }
    }
}

/// Network widths and input geometry. `paper` gives the published
/// configuration; tests shrink the widths for speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of history points fed to the model (t₀−(K−1)x … t₀).
    pub history_len: usize,
    pub resolution: usize,
    pub input_channels: usize,
    pub seed: u64,
    pub power_hidden: usize,
    pub power_latent: usize,
    pub predictor_width: usize,
    pub lstm_hidden: usize,
    pub fire_channels: Vec<usize>,
}

impl ModelConfig {
    pub fn paper(kind: ModelKind, resolution: usize, input_channels: usize, seed: u64) -> Self {
        ModelConfig {
            kind,
            history_len: 6,
            resolution,
            input_channels,
            seed,
            power_hidden: 64,
            power_latent: 64,
            predictor_width: 1024,
            lstm_hidden: LATENT_DIM,
            fire_channels: crate::layers::encoder::DEFAULT_FIRE_CHANNELS.to_vec(),
        }
    }

    /// Input width of the predictor MLP for this configuration.
    pub fn predictor_input(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => 0,
            ModelKind::Cnn => self.history_len * LATENT_DIM + self.power_latent,
            ModelKind::Lstm | ModelKind::LstmFull => self.lstm_hidden + self.power_latent,
        }
    }
}

/// Auxiliary branches of LSTM-Full. The per-step regressors share one
/// set of weights across timesteps, mirroring the encoder's sharing;
/// the variation predictors consume only the LSTM output.
#[derive(Debug)]
pub struct AuxHeads<T: Element> {
    pub power_regressor: MlpStack<T>,
    pub sun_regressor: MlpStack<T>,
    pub image_decoder: ImageDecoder<T>,
    pub sun_variation: MlpStack<T>,
    pub sky_variation: MlpStack<T>,
}

impl<T: Element> Visit<T> for AuxHeads<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.power_regressor
            .visit_params(&format!("{prefix}.power_regressor"), f);
        self.sun_regressor
            .visit_params(&format!("{prefix}.sun_regressor"), f);
        self.image_decoder
            .visit_params(&format!("{prefix}.image_decoder"), f);
        self.sun_variation
            .visit_params(&format!("{prefix}.sun_variation"), f);
        self.sky_variation
            .visit_params(&format!("{prefix}.sky_variation"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.image_decoder
            .visit_buffers(&format!("{prefix}.image_decoder"), f);
    }
}

#[derive(Debug)]
enum Arch<T: Element> {
    PowerOnly {
        stack: MlpStack<T>,
    },
    WithImages {
        image_encoder: ImageEncoder<T>,
        power_encoder: MlpStack<T>,
        lstm: Option<LstmStack<T>>,
        predictor: MlpStack<T>,
        aux: Option<AuxHeads<T>>,
    },
}

/// One forecast model instance.
#[derive(Debug)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    arch: Arch<T>,
}

/// Inputs for one forward pass over a batch of samples.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    /// Normalized log-power history, [N, K].
    pub power_history: Tensor<T>,
    /// One [N, C, H, H] stack per history step; empty for the MLP.
    pub image_steps: Vec<Tensor<T>>,
}

/// Everything a loss may need from one forward pass.
pub struct ForwardOut {
    /// Δq̂ ∈ (−1,1), shape [N, 1].
    pub delta_q_hat: Var,
    /// Per-step image latents z_i, [N, 256] each (image models only).
    pub step_latents: Vec<Var>,
    /// LSTM output z_I (LSTM variants only).
    pub temporal_latent: Option<Var>,
    /// The image input leaves, kept for reconstruction targets.
    pub image_vars: Vec<Var>,
}

/// Builds the model for `config.kind` with seeded initialization. Output
/// layers of all prediction heads start at zero, so a fresh model is
/// persistence-equivalent.
pub fn build_model<T: Element>(config: ModelConfig) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let arch = match config.kind {
        ModelKind::Mlp => Arch::PowerOnly {
            stack: MlpStack::new(
                config.history_len,
                &[config.power_hidden, config.power_hidden],
                1,
                true,
                &mut rng,
            ),
        },
        kind => {
            let image_encoder = ImageEncoder::new(
                config.input_channels,
                config.resolution,
                &config.fire_channels,
                &mut rng,
            )?;
            let power_encoder = MlpStack::new(
                config.history_len,
                &[config.power_hidden, config.power_hidden],
                config.power_latent,
                false,
                &mut rng,
            );
            let lstm = match kind {
                ModelKind::Cnn => None,
                _ => Some(LstmStack::new(LATENT_DIM, config.lstm_hidden, &mut rng)),
            };
            let w = config.predictor_width;
            let predictor = MlpStack::new(config.predictor_input(), &[w, w, w], 1, true, &mut rng);
            let aux = (kind == ModelKind::LstmFull)
                .then(|| -> Result<AuxHeads<T>> {
                    Ok(AuxHeads {
                        power_regressor: MlpStack::new(LATENT_DIM, &[], 1, true, &mut rng),
                        sun_regressor: MlpStack::new(LATENT_DIM, &[], 2, true, &mut rng),
                        image_decoder: ImageDecoder::new(
                            config.resolution,
                            config.input_channels,
                            &mut rng,
                        )?,
                        sun_variation: MlpStack::new(config.lstm_hidden, &[], 2, true, &mut rng),
                        sky_variation: MlpStack::new(config.lstm_hidden, &[], 1, true, &mut rng),
                    })
                })
                .transpose()?;
            Arch::WithImages {
                image_encoder,
                power_encoder,
                lstm,
                predictor,
                aux,
            }
        }
    };
    Ok(Model { config, arch })
}

impl<T: Element> Model<T> {
    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Registers every parameter on the tape. Call once per tape, before
    /// `forward`.
    pub fn bind(&mut self, tape: &mut Tape<T>, requires_grad: bool) {
        bind_all(self, tape, requires_grad);
    }

    /// Total number of trainable parameter elements.
    pub fn parameter_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params("model", &mut |_, p| count += p.value.numel());
        count
    }

    /// Forward pass of the main prediction path over a bound tape.
    /// Auxiliary heads are forwarded by [`multitask_loss`], which skips
    /// every branch whose weight is zero.
    pub fn forward(&mut self, tape: &mut Tape<T>, batch: &Batch<T>, mode: Mode) -> Result<ForwardOut> {
        let k = self.config.history_len;
        match &mut self.arch {
            Arch::PowerOnly { stack } => {
                let x = tape.constant(batch.power_history.clone());
                let sig = stack.forward(tape, x, mode)?;
                let delta = remap_to_signed(tape, sig);
                Ok(ForwardOut {
                    delta_q_hat: delta,
                    step_latents: Vec::new(),
                    temporal_latent: None,
                    image_vars: Vec::new(),
                })
            }
            Arch::WithImages {
                image_encoder,
                power_encoder,
                lstm,
                predictor,
                aux: _,
            } => {
                if batch.image_steps.len() != k {
                    return Err(ModelError::MissingImages);
                }
                let power = tape.constant(batch.power_history.clone());
                let z_p = power_encoder.forward(tape, power, mode)?;
                let mut image_vars = Vec::with_capacity(k);
                let mut step_latents = Vec::with_capacity(k);
                for stack in &batch.image_steps {
                    let img = tape.constant(stack.clone());
                    image_vars.push(img);
                    step_latents.push(image_encoder.forward(tape, img, mode)?);
                }
                let (predictor_in, temporal_latent) = match lstm {
                    None => {
                        let mut parts = step_latents.clone();
                        parts.push(z_p);
                        (tape.concat(&parts, 1)?, None)
                    }
                    Some(lstm) => {
                        let z_seq = lstm.forward(tape, &step_latents)?;
                        (tape.concat(&[z_seq, z_p], 1)?, Some(z_seq))
                    }
                };
                let sig = predictor.forward(tape, predictor_in, mode)?;
                let delta = remap_to_signed(tape, sig);
                Ok(ForwardOut {
                    delta_q_hat: delta,
                    step_latents,
                    temporal_latent,
                    image_vars,
                })
            }
        }
    }

    /// Eval-mode predictions Δq̂ for a batch, shape [N].
    pub fn predict_batch(&mut self, batch: &Batch<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        self.bind(&mut tape, false);
        let out = self.forward(&mut tape, batch, Mode::Eval)?;
        Ok(tape.value(out.delta_q_hat).data().to_vec())
    }

    pub fn aux_mut(&mut self) -> Option<&mut AuxHeads<T>> {
        match &mut self.arch {
            Arch::WithImages { aux, .. } => aux.as_mut(),
            _ => None,
        }
    }
}

impl<T: Element> Visit<T> for Model<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match &mut self.arch {
            Arch::PowerOnly { stack } => stack.visit_params(&format!("{prefix}.predictor"), f),
            Arch::WithImages {
                image_encoder,
                power_encoder,
                lstm,
                predictor,
                aux,
            } => {
                image_encoder.visit_params(&format!("{prefix}.image_encoder"), f);
                power_encoder.visit_params(&format!("{prefix}.power_encoder"), f);
                if let Some(lstm) = lstm {
                    lstm.visit_params(&format!("{prefix}.lstm"), f);
                }
                predictor.visit_params(&format!("{prefix}.predictor"), f);
                if let Some(aux) = aux {
                    aux.visit_params(&format!("{prefix}.aux"), f);
                }
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match &mut self.arch {
            Arch::PowerOnly { stack } => stack.visit_buffers(&format!("{prefix}.predictor"), f),
            Arch::WithImages {
                image_encoder,
                power_encoder,
                lstm: _,
                predictor,
                aux,
            } => {
                image_encoder.visit_buffers(&format!("{prefix}.image_encoder"), f);
                power_encoder.visit_buffers(&format!("{prefix}.power_encoder"), f);
                predictor.visit_buffers(&format!("{prefix}.predictor"), f);
                if let Some(aux) = aux {
                    aux.visit_buffers(&format!("{prefix}.aux"), f);
                }
            }
        }
    }
}

/// Affine remap of a sigmoid output to (−1, 1).
fn remap_to_signed<T: Element>(tape: &mut Tape<T>, sigmoid_out: Var) -> Var {
    let doubled = tape.scale(sigmoid_out, T::from_f64_lossy(2.0));
    tape.add_scalar(doubled, T::from_f64_lossy(-1.0))
}

/// Mean over the batch of per-sample L2 residual norms.
fn mean_row_residual<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let r = tape.sub(pred, target)?;
    let rows = tape.row_l2(r)?;
    Ok(tape.mean(rows))
}

/// Main objective: the batch-mean L2 difference between predicted and
/// true variation, computed in normalized log space.
pub fn main_loss<T: Element>(tape: &mut Tape<T>, delta_q_hat: Var, delta_q: Var) -> Result<Var> {
    Ok(mean_row_residual(tape, delta_q_hat, delta_q)?)
}

/// Targets for the multi-task objective. Per-step vectors hold one entry
/// per history point, aligned with `Batch::image_steps`.
#[derive(Debug, Clone)]
pub struct MultitaskTargets<T: Element> {
    /// True variation Δq, [N, 1].
    pub delta_q: Tensor<T>,
    /// Per-step absolute normalized power q_i, each [N, 1].
    pub step_q: Option<Vec<Tensor<T>>>,
    /// Per-step normalized sun position (azimuth/2π, elevation/π), [N, 2].
    pub step_theta: Option<Vec<Tensor<T>>>,
    /// Sun position variation between t₀+x and t₀, [N, 2].
    pub delta_theta: Option<Tensor<T>>,
    /// Sky intensity variation between t₀+x and t₀, [N, 1].
    pub delta_s: Option<Tensor<T>>,
}

/// Unweighted values of each loss term, for logging and tests. Terms
/// whose λ is zero are skipped entirely (they never enter the graph) and
/// report as `None`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub delta_theta: Option<f64>,
    pub delta_s: Option<f64>,
    pub power: Option<f64>,
    pub theta: Option<f64>,
    pub image: Option<f64>,
}

/// Combined weighted loss over the auxiliary branches.
///
/// Per-step terms sum the batch-mean residual norms over the history
/// steps; sequence-level terms use the LSTM output. Returns the total
/// loss variable plus the unweighted per-term breakdown.
pub fn multitask_loss<T: Element>(
    tape: &mut Tape<T>,
    model: &mut Model<T>,
    fwd: &ForwardOut,
    targets: &MultitaskTargets<T>,
    weights: &LossWeights,
    mode: Mode,
) -> Result<(Var, LossBreakdown)> {
    let delta_q = tape.constant(targets.delta_q.clone());
    let main = main_loss(tape, fwd.delta_q_hat, delta_q)?;
    let mut breakdown = LossBreakdown {
        main: tape.value(main).item().to_f64_val(),
        ..Default::default()
    };
    let mut total = main;

    let steps = fwd.step_latents.len();
    let Some(aux) = model.aux_mut() else {
        return Ok((total, breakdown));
    };

    if weights.power > 0.0 {
        let step_q = targets
            .step_q
            .as_ref()
            .ok_or(ModelError::MissingTarget("power"))?;
        if step_q.len() != steps {
            return Err(ModelError::MissingTarget("power"));
        }
        let mut term: Option<Var> = None;
        for (z, q) in fwd.step_latents.iter().zip(step_q) {
            let pred = aux.power_regressor.forward(tape, *z, mode)?;
            let target = tape.constant(q.clone());
            let step = mean_row_residual(tape, pred, target)?;
            term = Some(match term {
                None => step,
                Some(acc) => tape.add(acc, step)?,
            });
        }
        let term = term.ok_or(ModelError::MissingTarget("power"))?;
        breakdown.power = Some(tape.value(term).item().to_f64_val());
        let weighted = tape.scale(term, T::from_f64_lossy(weights.power));
        total = tape.add(total, weighted)?;
    }

    if weights.theta > 0.0 {
        let step_theta = targets
            .step_theta
            .as_ref()
            .ok_or(ModelError::MissingTarget("sun_position"))?;
        if step_theta.len() != steps {
            return Err(ModelError::MissingTarget("sun_position"));
        }
        let mut term: Option<Var> = None;
        for (z, theta) in fwd.step_latents.iter().zip(step_theta) {
            let pred = aux.sun_regressor.forward(tape, *z, mode)?;
            let target = tape.constant(theta.clone());
            let step = mean_row_residual(tape, pred, target)?;
            term = Some(match term {
                None => step,
                Some(acc) => tape.add(acc, step)?,
            });
        }
        let term = term.ok_or(ModelError::MissingTarget("sun_position"))?;
        breakdown.theta = Some(tape.value(term).item().to_f64_val());
        let weighted = tape.scale(term, T::from_f64_lossy(weights.theta));
        total = tape.add(total, weighted)?;
    }

    if weights.image > 0.0 {
        if fwd.image_vars.len() != steps || steps == 0 {
            return Err(ModelError::MissingTarget("image"));
        }
        let mut term: Option<Var> = None;
        for (z, img) in fwd.step_latents.iter().zip(&fwd.image_vars) {
            let recon = aux.image_decoder.forward(tape, *z, mode)?;
            let n = tape.shape(recon)[0];
            let flat: usize = tape.shape(recon)[1..].iter().product();
            let recon_flat = tape.reshape(recon, vec![n, flat])?;
            let img_flat = tape.reshape(*img, vec![n, flat])?;
            let step = mean_row_residual(tape, recon_flat, img_flat)?;
            term = Some(match term {
                None => step,
                Some(acc) => tape.add(acc, step)?,
            });
        }
        let term = term.ok_or(ModelError::MissingTarget("image"))?;
        breakdown.image = Some(tape.value(term).item().to_f64_val());
        let weighted = tape.scale(term, T::from_f64_lossy(weights.image));
        total = tape.add(total, weighted)?;
    }

    let z_seq = fwd.temporal_latent;
    if weights.delta_theta > 0.0 {
        let z = z_seq.ok_or(ModelError::MissingTarget("sun_variation"))?;
        let target = targets
            .delta_theta
            .as_ref()
            .ok_or(ModelError::MissingTarget("sun_variation"))?;
        let sig = aux.sun_variation.forward(tape, z, mode)?;
        let pred = remap_to_signed(tape, sig);
        let target = tape.constant(target.clone());
        let term = mean_row_residual(tape, pred, target)?;
        breakdown.delta_theta = Some(tape.value(term).item().to_f64_val());
        let weighted = tape.scale(term, T::from_f64_lossy(weights.delta_theta));
        total = tape.add(total, weighted)?;
    }

    if weights.delta_s > 0.0 {
        let z = z_seq.ok_or(ModelError::MissingTarget("sky_intensity_variation"))?;
        let target = targets
            .delta_s
            .as_ref()
            .ok_or(ModelError::MissingTarget("sky_intensity_variation"))?;
        let sig = aux.sky_variation.forward(tape, z, mode)?;
        let pred = remap_to_signed(tape, sig);
        let target = tape.constant(target.clone());
        let term = mean_row_residual(tape, pred, target)?;
        breakdown.delta_s = Some(tape.value(term).item().to_f64_val());
        let weighted = tape.scale(term, T::from_f64_lossy(weights.delta_s));
        total = tape.add(total, weighted)?;
    }

    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            history_len: 3,
            resolution: 16,
            input_channels: 2,
            seed: 11,
            power_hidden: 8,
            power_latent: 8,
            predictor_width: 16,
            lstm_hidden: 12,
            fire_channels: vec![16],
        }
    }

    fn tiny_batch(n: usize, config: &ModelConfig) -> Batch<f64> {
        let k = config.history_len;
        let mut v = 0.0;
        let power = Tensor::new(
            vec![n, k],
            (0..n * k)
                .map(|_| {
                    v += 0.1;
                    (v as f64).sin().abs()
                })
                .collect(),
        )
        .unwrap();
        let image_steps = if config.kind.uses_images() {
            (0..k)
                .map(|s| {
                    let len = n * config.input_channels * config.resolution * config.resolution;
                    Tensor::new(
                        vec![n, config.input_channels, config.resolution, config.resolution],
                        (0..len).map(|i| ((i + s * 7) as f64 * 0.37).sin() * 0.5 + 0.5).collect(),
                    )
                    .unwrap()
                })
                .collect()
        } else {
            Vec::new()
        };
        Batch {
            power_history: power,
            image_steps,
        }
    }

    #[test]
    fn fresh_models_predict_zero_variation() {
        for kind in [ModelKind::Mlp, ModelKind::Cnn, ModelKind::Lstm, ModelKind::LstmFull] {
            let config = tiny_config(kind);
            let mut model = build_model::<f64>(config.clone()).unwrap();
            let batch = tiny_batch(2, &config);
            let pred = model.predict_batch(&batch).unwrap();
            assert!(
                pred.iter().all(|&v| v == 0.0),
                "{kind:?} fresh prediction should be exactly zero, got {pred:?}"
            );
        }
    }

    #[test]
    fn constant_history_permutation_invariant() {
        let config = tiny_config(ModelKind::Mlp);
        let mut model = build_model::<f64>(config.clone()).unwrap();
        let constant = Batch {
            power_history: Tensor::new(vec![1, 3], vec![0.6; 3]).unwrap(),
            image_steps: Vec::new(),
        };
        let a = model.predict_batch(&constant).unwrap();
        let b = model.predict_batch(&constant).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_images_rejected() {
        let config = tiny_config(ModelKind::Cnn);
        let mut model = build_model::<f64>(config.clone()).unwrap();
        let batch = Batch {
            power_history: Tensor::new(vec![1, 3], vec![0.5; 3]).unwrap(),
            image_steps: Vec::new(),
        };
        assert!(matches!(
            model.predict_batch(&batch),
            Err(ModelError::MissingImages)
        ));
    }

    #[test]
    fn predictor_input_dims_follow_architecture() {
        let mut cnn = ModelConfig::paper(ModelKind::Cnn, 128, 20, 0);
        cnn.history_len = 6;
        assert_eq!(cnn.predictor_input(), 6 * 256 + 64);
        let lstm = ModelConfig::paper(ModelKind::Lstm, 128, 20, 0);
        assert_eq!(lstm.predictor_input(), 256 + 64);
    }

    #[test]
    fn mlp_parameter_count_is_dense_stack_only() {
        let config = ModelConfig::paper(ModelKind::Mlp, 128, 20, 0);
        let mut model = build_model::<f32>(config).unwrap();
        // 6→64, 64→64, 64→1 with biases and batch-norm gain/shift on the
        // two hidden layers.
        let expected = (6 * 64 + 64) + (64 * 64 + 64) + (64 + 1) + 2 * (64 + 64);
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn main_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        let target = tape.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        let l = main_loss(&mut tape, pred, target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let pred = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let target = tape.constant(Tensor::new(vec![1, 1], vec![-0.5]).unwrap());
        let l = main_loss(&mut tape, pred, target).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let pred = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 0.4]).unwrap());
        let target = tape.constant(Tensor::new(vec![2, 1], vec![0.3, 0.0]).unwrap());
        let l = main_loss(&mut tape, pred, target).unwrap();
        assert!((tape.value(l).item() - 0.35).abs() < 1e-12);
    }

    fn full_targets(n: usize, k: usize) -> MultitaskTargets<f64> {
        MultitaskTargets {
            delta_q: Tensor::new(vec![n, 1], vec![0.05; n]).unwrap(),
            step_q: Some(vec![Tensor::new(vec![n, 1], vec![0.6; n]).unwrap(); k]),
            step_theta: Some(vec![Tensor::new(vec![n, 2], vec![0.4; 2 * n]).unwrap(); k]),
            delta_theta: Some(Tensor::new(vec![n, 2], vec![0.001; 2 * n]).unwrap()),
            delta_s: Some(Tensor::new(vec![n, 1], vec![0.01; n]).unwrap()),
        }
    }

    #[test]
    fn multitask_zero_weights_equal_main_loss() {
        let config = tiny_config(ModelKind::LstmFull);
        let mut model = build_model::<f64>(config.clone()).unwrap();
        let batch = tiny_batch(2, &config);
        let targets = full_targets(2, config.history_len);
        let mut tape = Tape::new();
        model.bind(&mut tape, false);
        let weights = LossWeights::zero();
        let fwd = model
            .forward(&mut tape, &batch, Mode::Eval)
            .unwrap();
        let (total, breakdown) =
            multitask_loss(&mut tape, &mut model, &fwd, &targets, &weights, Mode::Eval).unwrap();
        assert_eq!(tape.value(total).item(), breakdown.main);
        assert!(breakdown.power.is_none());
        assert!(breakdown.image.is_none());
    }

    #[test]
    fn multitask_single_term_weighting() {
        // Only L_Δθ nonzero at 0.01 under λ_Δθ=1e3 contributes 10 to the
        // total. Targets are engineered so every other term is zero.
        let config = tiny_config(ModelKind::LstmFull);
        let mut model = build_model::<f64>(config.clone()).unwrap();
        let batch = tiny_batch(2, &config);
        let mut tape = Tape::new();
        model.bind(&mut tape, false);
        let weights = LossWeights {
            delta_theta: 1e3,
            delta_s: 0.0,
            power: 0.0,
            theta: 0.0,
            image: 0.0,
        };
        let fwd = model
            .forward(&mut tape, &batch, Mode::Eval)
            .unwrap();
        // Fresh variation heads predict exactly 0; a Δθ target with norm
        // 0.01 per row makes the unweighted term 0.01.
        let mut targets = full_targets(2, config.history_len);
        targets.delta_q = Tensor::new(vec![2, 1], vec![0.0; 2]).unwrap();
        let d = 0.01 / 2.0f64.sqrt();
        targets.delta_theta = Some(Tensor::new(vec![2, 2], vec![d; 4]).unwrap());
        let (total, breakdown) =
            multitask_loss(&mut tape, &mut model, &fwd, &targets, &weights, Mode::Eval).unwrap();
        assert!((breakdown.delta_theta.unwrap() - 0.01).abs() < 1e-12);
        assert!((tape.value(total).item() - 10.0).abs() < 1e-9);
        assert_eq!(breakdown.main, 0.0);
    }

    #[test]
    fn multitask_perfect_predictions_zero_loss() {
        // All predictions equal targets → total 0 and every term 0.
        // Fresh heads predict 0.5 (regressors) and 0 (variations), so
        // targets are set to those values.
        let config = tiny_config(ModelKind::LstmFull);
        let mut model = build_model::<f64>(config.clone()).unwrap();
        let batch = tiny_batch(2, &config);
        let k = config.history_len;
        let mut tape = Tape::new();
        model.bind(&mut tape, false);
        let weights = LossWeights {
            image: 0.0, // reconstruction of arbitrary input cannot be exact
            ..LossWeights::default()
        };
        let fwd = model
            .forward(&mut tape, &batch, Mode::Eval)
            .unwrap();
        let targets = MultitaskTargets {
            delta_q: Tensor::new(vec![2, 1], vec![0.0; 2]).unwrap(),
            step_q: Some(vec![Tensor::new(vec![2, 1], vec![0.5; 2]).unwrap(); k]),
            step_theta: Some(vec![Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(); k]),
            delta_theta: Some(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap()),
            delta_s: Some(Tensor::new(vec![2, 1], vec![0.0; 2]).unwrap()),
        };
        let (total, breakdown) =
            multitask_loss(&mut tape, &mut model, &fwd, &targets, &weights, Mode::Eval).unwrap();
        assert_eq!(tape.value(total).item(), 0.0);
        assert_eq!(breakdown.main, 0.0);
        assert_eq!(breakdown.power, Some(0.0));
        assert_eq!(breakdown.theta, Some(0.0));
        assert_eq!(breakdown.delta_theta, Some(0.0));
        assert_eq!(breakdown.delta_s, Some(0.0));
    }

    #[test]
    fn multitask_missing_target_names_task() {
        let config = tiny_config(ModelKind::LstmFull);
        let mut model = build_model::<f64>(config.clone()).unwrap();
        let batch = tiny_batch(2, &config);
        let mut tape = Tape::new();
        model.bind(&mut tape, false);
        let weights = LossWeights::default();
        let fwd = model
            .forward(&mut tape, &batch, Mode::Eval)
            .unwrap();
        let mut targets = full_targets(2, config.history_len);
        targets.step_theta = None;
        let err = multitask_loss(&mut tape, &mut model, &fwd, &targets, &weights, Mode::Eval)
            .unwrap_err();
        assert!(err.to_string().contains("sun_position"), "{err}");
    }

    #[test]
    fn multitask_linear_in_each_lambda() {
        let config = tiny_config(ModelKind::LstmFull);
        let mut model = build_model::<f64>(config.clone()).unwrap();
        let batch = tiny_batch(2, &config);
        let targets = full_targets(2, config.history_len);

        let run = |model: &mut Model<f64>, weights: &LossWeights| -> f64 {
            let mut tape = Tape::new();
            model.bind(&mut tape, false);
            let fwd = model
                .forward(&mut tape, &batch, Mode::Eval)
                .unwrap();
            let (total, _) =
                multitask_loss(&mut tape, model, &fwd, &targets, weights, Mode::Eval).unwrap();
            tape.value(total).item()
        };

        let base = LossWeights::default();
        let mut doubled = base;
        doubled.theta *= 2.0;
        let l_base = run(&mut model, &base);
        let l_doubled = run(&mut model, &doubled);
        // Doubling λ_θ adds exactly one more λ_θ·L_θ contribution.
        let mut theta_only = LossWeights::zero();
        theta_only.theta = base.theta;
        let none = LossWeights::zero();
        let l_theta = run(&mut model, &theta_only) - run(&mut model, &none);
        assert!((l_doubled - l_base - l_theta).abs() < 1e-12);
    }
}
