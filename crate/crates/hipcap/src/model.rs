//! Full captioning model: configuration, parameter registration, per-scene
//! assembly, decoding wrappers, and checkpoint persistence.
//!
//! A [`Model`] describes *what* to build (dimensions, switches, vocabulary);
//! the learnable state lives in a separate [`ParamStore`] so training can
//! mutate parameters while the model stays shared.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::decoder::{
    beam_search, greedy_decode, sample_caption, score_caption, AblationFlags, DecoderDims,
    DecoderParams, FeatureSet, SceneContext,
};
use crate::encoder::{encode, TreeLstmParams};
use crate::error::{HipError, Result};
use crate::hierarchy::{build_tree, HierarchyTree, Region};
use crate::numerics::{load_checkpoint, save_checkpoint, Graph, NodeId, ParamStore};
use crate::relation::{build_graph, gcn_enrich, GcnParams};

/// Everything needed to rebuild the network (persisted in the checkpoint
/// manifest).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw region/instance feature dimension.
    pub d_r: usize,
    /// Encoder (Tree-LSTM) hidden size.
    pub h_enc: usize,
    /// Decoder LSTM hidden size.
    pub h_dec: usize,
    /// Word embedding dimension.
    pub d_word: usize,
    /// Attention dimension.
    pub d_attn: usize,
    /// Tree-construction IoU threshold.
    pub epsilon: f64,
    /// Maximum generated caption length.
    pub max_len: usize,
    /// Relation labels the GCN knows (when the relation pass is on).
    pub relation_labels: usize,
    /// Nearest-neighbor count for the edge fallback.
    pub k_fallback: usize,
    pub flags: AblationFlags,
    /// Class count of the optional multi-label recognition head.
    pub recognition_classes: Option<usize>,
    pub vocab: Vocab,
}

impl ModelConfig {
    /// Paper-scale defaults around a given vocabulary and feature size.
    pub fn new(vocab: Vocab, d_r: usize) -> ModelConfig {
        ModelConfig {
            d_r,
            h_enc: 500,
            h_dec: 1000,
            d_word: 256,
            d_attn: 512,
            epsilon: 0.1,
            max_len: 20,
            relation_labels: 5,
            k_fallback: 2,
            flags: AblationFlags::default(),
            recognition_classes: None,
            vocab,
        }
    }

    /// Shrunk dimensions for fast tests and desk-scale runs.
    pub fn desk(vocab: Vocab, d_r: usize) -> ModelConfig {
        ModelConfig {
            h_enc: 64,
            h_dec: 64,
            d_word: 32,
            d_attn: 32,
            ..ModelConfig::new(vocab, d_r)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(HipError::Config(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.d_r == 0 || self.h_enc == 0 || self.h_dec == 0 || self.d_word == 0 || self.d_attn == 0 {
            return Err(HipError::Config("model dimensions must be positive".into()));
        }
        if self.vocab.len() < 4 {
            return Err(HipError::Config("vocabulary is missing the special tokens".into()));
        }
        if self.recognition_classes == Some(0) {
            return Err(HipError::Config("recognition head needs at least one class".into()));
        }
        if self.recognition_classes.is_some() && !self.flags.use_treelstm {
            return Err(HipError::Config(
                "the recognition head reads the image feature, which needs the tree path".into(),
            ));
        }
        Ok(())
    }

    fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.vocab.len(),
            word: self.d_word,
            hidden: self.h_dec,
            attn: self.d_attn,
            feature: self.flags.descriptor_dim(self.d_r, self.h_enc),
            image: self.flags.image_dim(self.d_r, self.h_enc),
        }
    }
}

/// Per-region feature sets the relation pass enriches.
struct GcnStack {
    refined: Option<GcnParams>,
    regions: Option<GcnParams>,
    instances: Option<GcnParams>,
}

/// The assembled network. Learnable values live in the companion
/// [`ParamStore`] created by [`Model::new`].
pub struct Model {
    pub config: ModelConfig,
    encoder: Option<TreeLstmParams>,
    decoder: DecoderParams,
    gcn: Option<GcnStack>,
}

/// One scene wired into a graph and ready to score or decode.
pub struct PreparedScene {
    pub tree: HierarchyTree,
    pub features: FeatureSet,
    pub ctx: SceneContext,
}

const MANIFEST_KIND: &str = "hipcap-captioning";

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: ModelConfig,
}

impl Model {
    /// Registers all parameters for `config` with seed-determined
    /// initialization. Only components the flags enable are registered, so
    /// every parameter participates in training.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flags = config.flags;

        let encoder = if flags.use_treelstm {
            Some(TreeLstmParams::register(
                &mut store,
                &mut rng,
                "enc",
                config.d_r,
                config.h_enc,
            )?)
        } else {
            None
        };

        let gcn = if flags.use_gcn {
            let labels = config.relation_labels.max(1);
            let mut stack = GcnStack {
                refined: None,
                regions: None,
                instances: None,
            };
            if flags.use_treelstm {
                stack.refined = Some(GcnParams::register(&mut store, &mut rng, "gcn.rh", config.h_enc, labels)?);
            }
            if flags.use_regions {
                stack.regions = Some(GcnParams::register(&mut store, &mut rng, "gcn.r", config.d_r, labels)?);
            }
            if flags.use_instances {
                stack.instances = Some(GcnParams::register(&mut store, &mut rng, "gcn.m", config.d_r, labels)?);
            }
            Some(stack)
        } else {
            None
        };

        let decoder = DecoderParams::register(&mut store, &mut rng, "dec", config.decoder_dims())?;

        if let Some(classes) = config.recognition_classes {
            store.insert_xavier("rec.w", classes, config.h_enc, &mut rng)?;
            store.insert_zero_vector("rec.b", classes)?;
        }

        Ok((
            Model {
                config,
                encoder,
                decoder,
                gcn,
            },
            store,
        ))
    }

    /// Rebuilds the parameter descriptors around an existing store (used
    /// when loading checkpoints).
    fn attach(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let flags = config.flags;
        let encoder = flags
            .use_treelstm
            .then(|| TreeLstmParams::attach("enc", config.d_r, config.h_enc));
        let gcn = flags.use_gcn.then(|| {
            let labels = config.relation_labels.max(1);
            GcnStack {
                refined: flags
                    .use_treelstm
                    .then(|| GcnParams::attach("gcn.rh", config.h_enc, labels)),
                regions: flags
                    .use_regions
                    .then(|| GcnParams::attach("gcn.r", config.d_r, labels)),
                instances: flags
                    .use_instances
                    .then(|| GcnParams::attach("gcn.m", config.d_r, labels)),
            }
        });
        let decoder = DecoderParams::attach("dec", config.decoder_dims());
        Ok(Model {
            config,
            encoder,
            decoder,
            gcn,
        })
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn encoder(&self) -> Option<&TreeLstmParams> {
        self.encoder.as_ref()
    }

    /// Builds the tree, runs the enabled feature paths, and prepares the
    /// decoding context for one scene.
    pub fn prepare_scene(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        regions: &[Region],
        edges: Option<&[(usize, usize, usize)]>,
    ) -> Result<PreparedScene> {
        if regions.is_empty() {
            return Err(HipError::Input("scene has no regions".into()));
        }
        let tree = build_tree(regions, self.config.epsilon)?;

        let mut features = match &self.encoder {
            Some(params) => {
                let enc = encode(g, store, params, regions, &tree)?;
                FeatureSet::from_encoded(&enc)
            }
            None => raw_feature_set(g, regions, self.config.d_r)?,
        };

        if let Some(stack) = &self.gcn {
            let graph = build_graph(regions, edges, self.config.k_fallback)?;
            if let (Some(params), Some(refined)) = (&stack.refined, features.refined.take()) {
                features.refined = Some(gcn_enrich(g, store, params, &refined, &graph)?);
            }
            if let Some(params) = &stack.regions {
                features.regions = gcn_enrich(g, store, params, &features.regions, &graph)?;
            }
            if let Some(params) = &stack.instances {
                features.instances = gcn_enrich(g, store, params, &features.instances, &graph)?;
            }
        }

        let ctx = SceneContext::prepare(g, store, &self.decoder, &features, &self.config.flags)?;
        Ok(PreparedScene { tree, features, ctx })
    }

    /// Teacher-forced log-probability node for one caption.
    pub fn score(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &PreparedScene,
        tokens: &[usize],
    ) -> Result<NodeId> {
        score_caption(g, store, &self.decoder, &scene.ctx, tokens)
    }

    /// Beam-search caption for a scene (fresh graph).
    pub fn caption(
        &self,
        store: &ParamStore,
        regions: &[Region],
        edges: Option<&[(usize, usize, usize)]>,
        beam: usize,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let scene = self.prepare_scene(&mut g, store, regions, edges)?;
        beam_search(&mut g, store, &self.decoder, &scene.ctx, beam, self.config.max_len)
    }

    /// Greedy caption for a scene (fresh graph).
    pub fn caption_greedy(
        &self,
        store: &ParamStore,
        regions: &[Region],
        edges: Option<&[(usize, usize, usize)]>,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let scene = self.prepare_scene(&mut g, store, regions, edges)?;
        greedy_decode(&mut g, store, &self.decoder, &scene.ctx, self.config.max_len)
    }

    /// Sampled caption and its exact log-probability (fresh graph).
    pub fn caption_sample(
        &self,
        store: &ParamStore,
        regions: &[Region],
        edges: Option<&[(usize, usize, usize)]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<usize>, f64)> {
        let mut g = Graph::new();
        let scene = self.prepare_scene(&mut g, store, regions, edges)?;
        sample_caption(&mut g, store, &self.decoder, &scene.ctx, rng, self.config.max_len)
    }

    /// Recognition logits over classes, from the image feature.
    pub fn recognition_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &PreparedScene,
    ) -> Result<NodeId> {
        if self.config.recognition_classes.is_none() {
            return Err(HipError::State("model has no recognition head".into()));
        }
        let image = scene
            .features
            .image
            .ok_or_else(|| HipError::State("no image feature prepared".into()))?;
        let w = g.param(store, "rec.w")?;
        let b = g.param(store, "rec.b")?;
        g.affine(w, image, Some(b))
    }

    /// Writes config + parameters to a checkpoint file.
    pub fn save(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let manifest = Manifest {
            kind: MANIFEST_KIND.to_string(),
            config: self.config.clone(),
        };
        let json = serde_json::to_string(&manifest)
            .map_err(|e| HipError::Checkpoint(format!("manifest serialization failed: {e}")))?;
        save_checkpoint(path, &json, store)
    }

    /// Loads a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<(Model, ParamStore)> {
        let (manifest_json, store) = load_checkpoint(path)?;
        let manifest: Manifest = serde_json::from_str(&manifest_json)
            .map_err(|e| HipError::Checkpoint(format!("unreadable manifest: {e}")))?;
        if manifest.kind != MANIFEST_KIND {
            return Err(HipError::Checkpoint(format!(
                "checkpoint kind {:?} is not a captioning model",
                manifest.kind
            )));
        }
        let mut config = manifest.config;
        config.vocab.rebuild_index();
        let expected_embed = config.vocab.len() * config.d_word;
        match store.get("dec.embed") {
            Some(t) if t.values().len() == expected_embed => {}
            Some(t) => {
                return Err(HipError::Checkpoint(format!(
                    "embedding holds {} values but the manifest implies {expected_embed}",
                    t.values().len()
                )))
            }
            None => return Err(HipError::Checkpoint("checkpoint has no decoder embedding".into())),
        }
        let model = Model::attach(config)?;
        Ok((model, store))
    }
}

/// Feature set straight from raw features (tree path disabled).
fn raw_feature_set(g: &mut Graph, regions: &[Region], d_r: usize) -> Result<FeatureSet> {
    let k = regions.len();
    for (i, r) in regions.iter().enumerate() {
        if r.region_feature.len() != d_r || r.instance_feature.len() != d_r {
            return Err(HipError::Dimension {
                op: "prepare_scene".into(),
                detail: format!("region {i} features do not have length {d_r}"),
            });
        }
    }
    let raw_regions: Vec<NodeId> = regions.iter().map(|r| g.constant(&r.region_feature)).collect();
    let raw_instances: Vec<NodeId> = regions.iter().map(|r| g.constant(&r.instance_feature)).collect();
    let mut mean_r = vec![0.0; d_r];
    let mut mean_m = vec![0.0; d_r];
    for r in regions {
        for j in 0..d_r {
            mean_r[j] += r.region_feature[j] / k as f64;
            mean_m[j] += r.instance_feature[j] / k as f64;
        }
    }
    let mean_region = g.constant(&mean_r);
    let mean_instance = g.constant(&mean_m);
    Ok(FeatureSet {
        refined: None,
        regions: raw_regions,
        instances: raw_instances,
        image: None,
        mean_region,
        mean_instance,
    })
}
