//! The full prediction model: stem → species-aware MoE encoder →
//! profile-grouped dual-gated decoder.

pub mod decoder;
pub mod encoder;
pub mod params;
pub mod stem;

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::data::ProfileSchema;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorResult};

pub use decoder::{decoder_forward, DecoderGates, DecoderOutput, DecoderParams};
pub use encoder::{attention, encoder_forward, EncoderOutput, EncoderParams};
pub use params::{BoundParams, ParamId, ParamSet};
pub use stem::StemParams;

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub schema: ProfileSchema,
    pub params: ParamSet<T>,
    pub stem: StemParams,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Everything a forward pass exposes for losses, metrics and routing
/// analysis. Values are read off the tape via the node handles.
pub struct ForwardPass {
    /// [B, C_m, L] unconstrained predictions (base + enhancement).
    pub o_final: NodeId,
    /// [B, C_m, L] base head alone.
    pub o_base: NodeId,
    /// Per encoder layer: gate weights [B, L+1, N].
    pub encoder_gates: Vec<NodeId>,
    pub decoder_gates: DecoderGates,
}

impl<T: Scalar> Model<T> {
    /// Build a model with freshly initialized parameters. Initialization
    /// is deterministic in `seed` and identical across dtypes up to
    /// rounding.
    pub fn new(cfg: ModelConfig, schema: ProfileSchema, seed: u64) -> Result<Model<T>, crate::config::ConfigError> {
        cfg.validate()?;
        schema
            .validate()
            .map_err(|e| crate::config::ConfigError(e.to_string()))?;
        let mut params = ParamSet::new();
        let mut rng = Rng::stream(seed, "init", 0);
        let stem = StemParams::init(&cfg, &mut params, &mut rng);
        let encoder = EncoderParams::init(&cfg, schema.n_species(), &mut params, &mut rng);
        let decoder = DecoderParams::init(&cfg, &schema, &mut params, &mut rng);
        Ok(Model { cfg, schema, params, stem, encoder, decoder })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        self.params.bind(tape, trainable)
    }

    /// Forward one single-species batch of one-hot sequences
    /// [B, 4, seq_len] to track predictions [B, C_m, L].
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: &Tensor<T>,
        species: usize,
        train_mode: bool,
        mut noise: Option<&mut Rng>,
    ) -> TensorResult<ForwardPass> {
        let x_id = tape.constant(x.clone());
        let h = self.stem.forward(tape, bound, x_id)?;
        let enc = encoder_forward(
            tape,
            bound,
            &self.encoder,
            &self.cfg,
            h,
            species,
            train_mode,
            noise.as_deref_mut(),
        )?;
        let dec = decoder_forward(
            tape,
            bound,
            &self.decoder,
            &self.cfg,
            &self.schema,
            self.encoder.species_emb,
            enc.y,
            species,
            train_mode,
            noise,
        )?;
        Ok(ForwardPass {
            o_final: dec.o_final,
            o_base: dec.o_base,
            encoder_gates: enc.gate_weights,
            decoder_gates: dec.gates,
        })
    }

    /// Cast every parameter (used to derive an f64 twin for gradient
    /// checking).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamSet::new();
        for (_, name, value) in self.params.iter() {
            params.add(name.to_string(), value.cast::<U>());
        }
        Model {
            cfg: self.cfg.clone(),
            schema: self.schema.clone(),
            params,
            stem: self.stem.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}
