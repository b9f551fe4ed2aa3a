//! Text encoder, visual encoder with four-way region embeddings, gated
//! text-vision fusion, decoder, auxiliary heads and beam search.
//!
//! Every sublayer is pre-normalized with RMS norm and wrapped in a residual
//! connection. Parameter names follow `module.layer.index.role` paths.

mod beam;
mod config;
mod session;

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{sinusoidal_positions, ParamId, ParamStore, Scalar, Tensor};

pub use beam::{
    beam_search, beam_search_with, greedy_decode, greedy_with, length_penalty, BeamConfig, Hypothesis, ModelScorer,
    StepScorer,
};
pub use config::ModelConfig;
pub use session::{JointOutput, MimOutput, Mode, SeqOutput, Session, VisualInput};

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    norm1: ParamId,
    attn: AttnIds,
    norm2: ParamId,
    ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    norm1: ParamId,
    self_attn: AttnIds,
    norm2: ParamId,
    cross_attn: AttnIds,
    norm3: ParamId,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelIds {
    embed: ParamId,
    text_layers: Vec<EncoderLayer>,
    box_w: ParamId,
    box_b: ParamId,
    image_embed: ParamId,
    region_embed: ParamId,
    visual_layers: Vec<EncoderLayer>,
    fusion_attn: AttnIds,
    gate_w: ParamId,
    gate_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    decoder_layers: Vec<DecoderLayer>,
    decoder_norm: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    bridge: ParamId,
    summary_proj: ParamId,
    mim_w1: ParamId,
    mim_b1: ParamId,
    mim_w2: ParamId,
    mim_b2: ParamId,
}

/// Parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: ModelIds,
    /// Sinusoidal table shared by article and summary positions.
    positions: Tensor<T>,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: crate::Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::of(z * std)
            })
            .collect();
        self.store.add(name, Tensor::matrix(rows, cols, data)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.normal(name, fan_in, fan_out, 1.0 / num_traits::Float::sqrt(fan_in as f64))
    }

    fn zeros(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(&[1, cols]))
    }

    fn ones(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::full(&[1, cols], T::one()))
    }

    fn attn(&mut self, prefix: &str, d_query: usize, d_kv: usize, width: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            q: self.linear(&format!("{prefix}.q"), d_query, width)?,
            k: self.linear(&format!("{prefix}.k"), d_kv, width)?,
            v: self.linear(&format!("{prefix}.v"), d_kv, width)?,
            o: self.linear(&format!("{prefix}.o"), width, width)?,
        })
    }

    fn ffn(&mut self, prefix: &str, width: usize, hidden: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.linear(&format!("{prefix}.w1"), width, hidden)?,
            b1: self.zeros(&format!("{prefix}.b1"), hidden)?,
            w2: self.linear(&format!("{prefix}.w2"), hidden, width)?,
            b2: self.zeros(&format!("{prefix}.b2"), width)?,
        })
    }

    fn encoder_layer(&mut self, prefix: &str, width: usize, hidden: usize) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            norm1: self.ones(&format!("{prefix}.norm1"), width)?,
            attn: self.attn(&format!("{prefix}.attn"), width, width, width)?,
            norm2: self.ones(&format!("{prefix}.norm2"), width)?,
            ffn: self.ffn(&format!("{prefix}.ffn"), width, hidden)?,
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; the same seed gives identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: crate::rng_from_seed(seed) };
        let c = &config;
        let (d, dc, dv) = (c.d_model, c.d_fusion, c.d_visual);

        let embed = init.normal("text.embed", c.vocab_size, d, 1.0)?;
        let text_layers = (0..c.text_layers)
            .map(|i| init.encoder_layer(&format!("text.layer.{i}"), d, c.ffn_dim))
            .collect::<Result<Vec<_>>>()?;

        let box_w = init.linear("vision.box.w", 4, dv)?;
        let box_b = init.zeros("vision.box.b", dv)?;
        let image_embed = init.normal("vision.image_embed", c.n_images, dv, 1.0)?;
        let region_embed = init.normal("vision.region_embed", c.regions_per_image, dv, 1.0)?;
        let visual_layers = (0..c.visual_layers)
            .map(|i| init.encoder_layer(&format!("vision.layer.{i}"), dv, c.ffn_dim))
            .collect::<Result<Vec<_>>>()?;

        let fusion_attn = AttnIds {
            q: init.linear("fusion.attn.q", d, dc)?,
            k: init.linear("fusion.attn.k", dv, dc)?,
            v: init.linear("fusion.attn.v", dv, dc)?,
            o: init.linear("fusion.attn.o", dc, dc)?,
        };
        let gate_w = init.linear("fusion.gate.w", d + dc, dc)?;
        let gate_b = init.zeros("fusion.gate.b", dc)?;
        let fuse_w = init.linear("fusion.out.w", d + dc, d)?;
        let fuse_b = init.zeros("fusion.out.b", d)?;

        let decoder_layers = (0..c.text_layers)
            .map(|i| {
                let p = format!("decoder.layer.{i}");
                Ok(DecoderLayer {
                    norm1: init.ones(&format!("{p}.norm1"), d)?,
                    self_attn: init.attn(&format!("{p}.self_attn"), d, d, d)?,
                    norm2: init.ones(&format!("{p}.norm2"), d)?,
                    cross_attn: init.attn(&format!("{p}.cross_attn"), d, d, d)?,
                    norm3: init.ones(&format!("{p}.norm3"), d)?,
                    ffn: init.ffn(&format!("{p}.ffn"), d, c.ffn_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = init.ones("decoder.norm", d)?;
        let out_w = init.linear("decoder.out.w", d, c.vocab_size)?;
        let out_b = init.zeros("decoder.out.b", c.vocab_size)?;

        let hidden = (dv / 2).max(1);
        let bridge = init.linear("aux.bridge", dv, d)?;
        let summary_proj = init.linear("aux.summary_proj", d, dv)?;
        let mim_w1 = init.linear("aux.mim.w1", dv, hidden)?;
        let mim_b1 = init.zeros("aux.mim.b1", hidden)?;
        let mim_w2 = init.linear("aux.mim.w2", hidden, c.detector_classes)?;
        let mim_b2 = init.zeros("aux.mim.b2", c.detector_classes)?;

        let ids = ModelIds {
            embed,
            text_layers,
            box_w,
            box_b,
            image_embed,
            region_embed,
            visual_layers,
            fusion_attn,
            gate_w,
            gate_b,
            fuse_w,
            fuse_b,
            decoder_layers,
            decoder_norm,
            out_w,
            out_b,
            bridge,
            summary_proj,
            mim_w1,
            mim_b1,
            mim_w2,
            mim_b2,
        };
        let positions = sinusoidal_positions(config.max_text_len.max(config.max_summary_len), d);
        Ok(Self { config, params: store, ids, positions })
    }

    /// Rebuilds a model around stored parameters, checking every name and
    /// shape against the configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        for (name, t) in fresh.params.iter() {
            let id = params.find(name).ok_or_else(|| crate::error::invalid!("missing parameter `{}`", name))?;
            if params.get(id).dims2() != t.dims2() {
                return Err(crate::error::shape_err!(
                    "from_params",
                    "`{}` stored as {:?}, config needs {:?}",
                    name,
                    params.get(id).dims2(),
                    t.dims2()
                ));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(crate::error::invalid!(
                "parameter count {} does not match the configuration ({})",
                params.len(),
                fresh.params.len()
            ));
        }
        let names: Vec<_> = fresh.params.iter().map(|(n, _)| alloc::string::String::from(n)).collect();
        for name in names {
            let src = params.get(params.find(&name).expect("checked")).data().to_vec();
            fresh.params.set_data(&name, src)?;
        }
        Ok(fresh)
    }

    pub fn session(&self, mode: Mode) -> Session<'_, '_, T> {
        Session::new(self, mode)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            positions: self.positions.cast(),
        }
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }
}
