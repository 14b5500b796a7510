//! The full item model: both encoders, the co-attention interactor, fusion,
//! item initialization and knowledge aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{build_knowledge_text, Corpus, Item, KnowledgeText, ObjectSequence};
use crate::encoders::{knowledge_surface_features, EncodedSequence, ImageEncoder, SurfaceFeatures, TextEncoder};
use crate::error::{Error, Result};
use crate::interaction::{
    iffm_fuse, init_item_representation, CoAttendOutput, FusionAlgorithm, FusionGate, Interactor, Mode,
    StructureAggregator, TripleAttentionVars,
};
use crate::nn::{EncoderConfig, Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Encode the item's triples and aggregate them into `c*`.
    pub with_knowledge: bool,
    pub iffm: FusionAlgorithm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            with_knowledge: true,
            iffm: FusionAlgorithm::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }

    /// Short label used in metric files and plots.
    pub fn variant(&self) -> String {
        let k = if self.with_knowledge { "knowledge" } else { "no_knowledge" };
        format!("{k}+{}", self.iffm)
    }
}

/// Corpus-dependent sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub n_object_classes: usize,
    pub d_obj: usize,
}

impl ModelDims {
    pub fn of(corpus: &Corpus) -> Result<Self> {
        Ok(Self {
            vocab_size: corpus.token_vocab.len(),
            n_object_classes: corpus.object_class_vocab.len(),
            d_obj: corpus
                .object_dim()
                .ok_or_else(|| Error::InvalidInput("corpus has no objects to fix the feature dimension".into()))?,
        })
    }
}

/// Model-ready inputs of one item.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemInput {
    pub title: Vec<usize>,
    pub objects: ObjectSequence,
    pub knowledge: KnowledgeText,
}

impl ItemInput {
    /// Truncates the title and objects to the configured lengths and stitches
    /// the knowledge text.
    pub fn from_item(item: &Item, corpus: &Corpus, cfg: &EncoderConfig) -> Self {
        let mut title = item.title.clone();
        title.truncate(cfg.m_text);
        Self {
            title,
            objects: item.objects.truncated(cfg.m_obj),
            knowledge: build_knowledge_text(item, corpus, cfg.m_know),
        }
    }
}

pub struct ItemForward {
    pub text_initial: EncodedSequence,
    pub image_initial: EncodedSequence,
    pub interactive: CoAttendOutput,
    /// Fused title stream; its mask is the title mask.
    pub text: EncodedSequence,
    pub image: EncodedSequence,
    pub c: Var,
    pub c_star: Var,
    pub surface: SurfaceFeatures,
    pub attention: TripleAttentionVars,
}

#[derive(Debug, Clone)]
pub struct K3m {
    pub cfg: ModelConfig,
    pub dims: ModelDims,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    interactor: Interactor,
    text_gate: FusionGate,
    image_gate: FusionGate,
    agg: StructureAggregator,
}

impl K3m {
    pub fn new(cfg: ModelConfig, dims: ModelDims) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        Ok(Self {
            text: TextEncoder::new(e, dims.vocab_size),
            image: ImageEncoder::new(e, dims.d_obj),
            interactor: Interactor::new(e),
            text_gate: FusionGate::new("iffm.text", e.hidden_text),
            image_gate: FusionGate::new("iffm.image", e.hidden_image),
            agg: StructureAggregator::new(e),
            dims,
            cfg,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cfg.encoder.hidden_text
    }

    /// Adds every backbone parameter to `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let std = self.cfg.encoder.init_std;
        self.text.init(store, std, rng)?;
        self.image.init(store, std, rng)?;
        self.interactor.init(store, std, rng)?;
        self.text_gate.init(store)?;
        self.image_gate.init(store)?;
        self.agg.init(store, std, rng)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(store)
    }

    pub fn input(&self, item: &Item, corpus: &Corpus) -> ItemInput {
        ItemInput::from_item(item, corpus, &self.cfg.encoder)
    }

    pub fn forward(&self, g: &mut Graph, input: &ItemInput, mode: Mode, rng: &mut impl Rng) -> Result<ItemForward> {
        let e = &self.cfg.encoder;
        let text_initial = self.text.forward(g, &input.title, e.m_text)?;
        let image_initial = self.image.forward(g, &input.objects, e.m_obj)?;
        let interactive = self.interactor.co_attend(g, &text_initial, &image_initial)?;
        let alg = self.cfg.iffm;
        let t = iffm_fuse(g, text_initial.states, interactive.text, alg, &self.text_gate, mode, rng)?;
        let i = iffm_fuse(g, image_initial.states, interactive.image, alg, &self.image_gate, mode, rng)?;
        let text = EncodedSequence {
            states: t,
            mask: text_initial.mask.clone(),
        };
        let image = EncodedSequence {
            states: i,
            mask: image_initial.mask.clone(),
        };
        let w0 = self.agg.w0(g)?;
        let c = init_item_representation(g, text.states, &text.mask, image.states, &image.mask, w0)?;
        let surface = if self.cfg.with_knowledge {
            knowledge_surface_features(g, &self.text, &input.knowledge, e.m_know)?
        } else {
            SurfaceFeatures::default()
        };
        let agg = self.agg.aggregate(g, c, &surface)?;
        Ok(ItemForward {
            text_initial,
            image_initial,
            interactive,
            text,
            image,
            c,
            c_star: agg.c_star,
            surface,
            attention: agg.attention,
        })
    }
}
