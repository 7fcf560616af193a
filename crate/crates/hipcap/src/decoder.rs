//! Two-layer attention LSTM that turns encoded scenes into captions.
//!
//! Layer 1 watches the word stream plus the image-level features; an
//! additive attention over per-region descriptors then picks what layer 2
//! should look at; layer 2 feeds the output projection. Supports
//! teacher-forced scoring (differentiable), greedy decoding, beam search,
//! and ancestral sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::encoder::EncodedScene;
use crate::error::{HipError, Result};
use crate::numerics::{Graph, NodeId, ParamStore};

/// Feature-set switches. `use_gcn` changes how features are prepared (the
/// relation pass); the other three select which components reach the
/// decoder, both per region and image level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_regions: bool,
    pub use_instances: bool,
    pub use_treelstm: bool,
    pub use_gcn: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_regions: true,
            use_instances: true,
            use_treelstm: true,
            use_gcn: false,
        }
    }
}

impl AblationFlags {
    /// At least one feature component must survive.
    pub fn validate(&self) -> Result<()> {
        if !(self.use_regions || self.use_instances || self.use_treelstm) {
            return Err(HipError::Config(
                "all feature components disabled; nothing to decode from".into(),
            ));
        }
        Ok(())
    }

    /// Length of the per-region descriptor v_i.
    pub fn descriptor_dim(&self, d_r: usize, h_enc: usize) -> usize {
        let mut d = 0;
        if self.use_treelstm {
            d += h_enc;
        }
        if self.use_regions {
            d += d_r;
        }
        if self.use_instances {
            d += d_r;
        }
        d
    }

    /// Length of the image-level block entering layer 1 (I^h, r̄, m̄ under
    /// the same switches).
    pub fn image_dim(&self, d_r: usize, h_enc: usize) -> usize {
        self.descriptor_dim(d_r, h_enc)
    }
}

/// Standard LSTM cell parameters under `{prefix}.{w,u,b}_{i,f,g,o}`.
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
}

const CELL_GATES: [&str; 4] = ["i", "f", "g", "o"];

impl LstmCellParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<LstmCellParams> {
        for gate in CELL_GATES {
            store.insert_xavier(&format!("{prefix}.w_{gate}"), hidden, input_dim, rng)?;
            store.insert_xavier(&format!("{prefix}.u_{gate}"), hidden, hidden, rng)?;
            store.insert_zero_vector(&format!("{prefix}.b_{gate}"), hidden)?;
        }
        Ok(LstmCellParams::attach(prefix, input_dim, hidden))
    }

    pub fn attach(prefix: &str, input_dim: usize, hidden: usize) -> LstmCellParams {
        LstmCellParams {
            prefix: prefix.to_string(),
            input_dim,
            hidden,
        }
    }

    /// One step: gates see input x and previous hidden h.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let pre = |g: &mut Graph, gate: &str| -> Result<NodeId> {
            let w = g.param(store, &format!("{}.w_{gate}", self.prefix))?;
            let u = g.param(store, &format!("{}.u_{gate}", self.prefix))?;
            let b = g.param(store, &format!("{}.b_{gate}", self.prefix))?;
            let wx = g.affine(w, x, Some(b))?;
            let uh = g.affine(u, h_prev, None)?;
            g.add(&[wx, uh])
        };
        let i_pre = pre(g, "i")?;
        let f_pre = pre(g, "f")?;
        let g_pre = pre(g, "g")?;
        let o_pre = pre(g, "o")?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let cand = g.tanh(g_pre)?;
        let o = g.sigmoid(o_pre)?;
        let keep = g.hadamard(f, c_prev)?;
        let write = g.hadamard(i, cand)?;
        let c = g.add(&[keep, write])?;
        let tc = g.tanh(c)?;
        let h = g.hadamard(o, tc)?;
        Ok((h, c))
    }
}

/// Decoder dimensions. `feature` is the per-region descriptor length,
/// `image` the image-level block length (both depend on the ablation
/// flags).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub vocab: usize,
    pub word: usize,
    pub hidden: usize,
    pub attn: usize,
    pub feature: usize,
    pub image: usize,
}

/// Parameter names under `{prefix}`: `embed` (V×D_s), layer cells `l1`/`l2`,
/// attention `att.w_va` (A×feature), `att.w_ha` (A×H_d), `att.w_a` (A),
/// output `out.w` (V×H_d) and `out.b` (V).
#[derive(Clone, Debug)]
pub struct DecoderParams {
    prefix: String,
    pub dims: DecoderDims,
    l1: LstmCellParams,
    l2: LstmCellParams,
}

impl DecoderParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dims: DecoderDims,
    ) -> Result<DecoderParams> {
        if dims.vocab < 4 {
            return Err(HipError::Config(
                "vocabulary must include the four special tokens".into(),
            ));
        }
        if dims.word == 0 || dims.hidden == 0 || dims.attn == 0 || dims.feature == 0 || dims.image == 0 {
            return Err(HipError::Config("decoder dimensions must be positive".into()));
        }
        store.insert_xavier(&format!("{prefix}.embed"), dims.vocab, dims.word, rng)?;
        let l1_input = dims.word + dims.hidden + dims.image;
        LstmCellParams::register(store, rng, &format!("{prefix}.l1"), l1_input, dims.hidden)?;
        let l2_input = dims.feature + dims.hidden;
        LstmCellParams::register(store, rng, &format!("{prefix}.l2"), l2_input, dims.hidden)?;
        store.insert_xavier(&format!("{prefix}.att.w_va"), dims.attn, dims.feature, rng)?;
        store.insert_xavier(&format!("{prefix}.att.w_ha"), dims.attn, dims.hidden, rng)?;
        store.insert_xavier_vector(&format!("{prefix}.att.w_a"), dims.attn, rng)?;
        store.insert_xavier(&format!("{prefix}.out.w"), dims.vocab, dims.hidden, rng)?;
        store.insert_zero_vector(&format!("{prefix}.out.b"), dims.vocab)?;
        Ok(DecoderParams::attach(prefix, dims))
    }

    pub fn attach(prefix: &str, dims: DecoderDims) -> DecoderParams {
        DecoderParams {
            prefix: prefix.to_string(),
            dims,
            l1: LstmCellParams::attach(
                &format!("{prefix}.l1"),
                dims.word + dims.hidden + dims.image,
                dims.hidden,
            ),
            l2: LstmCellParams::attach(&format!("{prefix}.l2"), dims.feature + dims.hidden, dims.hidden),
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }
}

/// The feature sets one scene offers the decoder, after any relation pass.
/// `refined`/`image` are absent when the tree path is switched off.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub refined: Option<Vec<NodeId>>,
    pub regions: Vec<NodeId>,
    pub instances: Vec<NodeId>,
    pub image: Option<NodeId>,
    pub mean_region: NodeId,
    pub mean_instance: NodeId,
}

impl FeatureSet {
    pub fn from_encoded(scene: &EncodedScene) -> FeatureSet {
        FeatureSet {
            refined: Some(scene.refined_regions.clone()),
            regions: scene.raw_regions.clone(),
            instances: scene.raw_instances.clone(),
            image: Some(scene.image_feature),
            mean_region: scene.mean_region,
            mean_instance: scene.mean_instance,
        }
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }
}

/// Per-region descriptor v_i: the enabled components concatenated in the
/// fixed order (refined, region, instance).
pub fn region_descriptor(
    g: &mut Graph,
    features: &FeatureSet,
    flags: &AblationFlags,
    i: usize,
) -> Result<NodeId> {
    flags.validate()?;
    if i >= features.region_count() {
        return Err(HipError::Input(format!(
            "region {i} out of range (scene has {})",
            features.region_count()
        )));
    }
    let mut parts = Vec::new();
    if flags.use_treelstm {
        let refined = features.refined.as_ref().ok_or_else(|| {
            HipError::State("tree path enabled but no refined features were prepared".into())
        })?;
        parts.push(refined[i]);
    }
    if flags.use_regions {
        parts.push(features.regions[i]);
    }
    if flags.use_instances {
        parts.push(features.instances[i]);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts)
}

/// Scene-level work shared across decode steps: descriptors, their
/// attention projections, and the image-level input block.
#[derive(Clone, Debug)]
pub struct SceneContext {
    descriptors: Vec<NodeId>,
    projected: Vec<NodeId>,
    image_block: NodeId,
}

impl SceneContext {
    pub fn prepare(
        g: &mut Graph,
        store: &ParamStore,
        params: &DecoderParams,
        features: &FeatureSet,
        flags: &AblationFlags,
    ) -> Result<SceneContext> {
        flags.validate()?;
        let k = features.region_count();
        if k == 0 {
            return Err(HipError::Input("cannot decode a scene with zero regions".into()));
        }

        let mut image_parts = Vec::new();
        if flags.use_treelstm {
            let image = features.image.ok_or_else(|| {
                HipError::State("tree path enabled but no image feature was prepared".into())
            })?;
            image_parts.push(image);
        }
        if flags.use_regions {
            image_parts.push(features.mean_region);
        }
        if flags.use_instances {
            image_parts.push(features.mean_instance);
        }
        let image_block = if image_parts.len() == 1 {
            image_parts[0]
        } else {
            g.concat(&image_parts)?
        };
        if g.len_of(image_block) != params.dims.image {
            return Err(HipError::Config(format!(
                "image-level block has length {} but the decoder was built for {}",
                g.len_of(image_block),
                params.dims.image
            )));
        }

        let w_va = g.param(store, &params.name("att.w_va"))?;
        let mut descriptors = Vec::with_capacity(k);
        let mut projected = Vec::with_capacity(k);
        for i in 0..k {
            let v = region_descriptor(g, features, flags, i)?;
            if g.len_of(v) != params.dims.feature {
                return Err(HipError::Config(format!(
                    "region descriptor has length {} but the decoder was built for {}",
                    g.len_of(v),
                    params.dims.feature
                )));
            }
            projected.push(g.affine(w_va, v, None)?);
            descriptors.push(v);
        }
        Ok(SceneContext {
            descriptors,
            projected,
            image_block,
        })
    }

    pub fn region_count(&self) -> usize {
        self.descriptors.len()
    }
}

/// Decoding state after `step` tokens of context.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub h1: NodeId,
    pub c1: NodeId,
    pub h2: NodeId,
    pub c2: NodeId,
    pub step: usize,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl DecodeState {
    /// Fresh state: zero LSTM states, token list holding only BOS.
    pub fn start(g: &mut Graph, params: &DecoderParams) -> DecodeState {
        let zero = vec![0.0; params.dims.hidden];
        let z1 = g.constant(&zero);
        let z2 = g.constant(&zero);
        let z3 = g.constant(&zero);
        let z4 = g.constant(&zero);
        DecodeState {
            h1: z1,
            c1: z2,
            h2: z3,
            c2: z4,
            step: 0,
            tokens: vec![BOS],
            log_prob: 0.0,
        }
    }

    /// Records a chosen token and its log-probability.
    pub fn advance(&mut self, token: usize, log_prob: f64) {
        self.tokens.push(token);
        self.log_prob += log_prob;
    }
}

/// Everything one decode step produces.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecodeState,
    /// Log-distribution over the vocabulary.
    pub log_probs: NodeId,
    /// Attention distribution λ over regions.
    pub attention: NodeId,
    /// Attended feature v̂.
    pub context: NodeId,
}

/// One decoder step conditioned on `prev_token`.
pub fn decode_step(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderParams,
    ctx: &SceneContext,
    state: &DecodeState,
    prev_token: usize,
) -> Result<StepOutput> {
    if prev_token >= params.dims.vocab {
        return Err(HipError::Input(format!(
            "token {prev_token} outside vocabulary of size {}",
            params.dims.vocab
        )));
    }
    let embed = g.param(store, &params.name("embed"))?;
    let word = g.row(embed, prev_token)?;
    let x1 = g.concat(&[word, state.h2, ctx.image_block])?;
    let (h1, c1) = params.l1.step(g, store, x1, state.h1, state.c1)?;

    let w_ha = g.param(store, &params.name("att.w_ha"))?;
    let w_a = g.param(store, &params.name("att.w_a"))?;
    let hidden_proj = g.affine(w_ha, h1, None)?;
    let mut scores = Vec::with_capacity(ctx.region_count());
    for &p in &ctx.projected {
        let pre = g.add(&[p, hidden_proj])?;
        let t = g.tanh(pre)?;
        let weighted = g.hadamard(w_a, t)?;
        scores.push(g.sum_elements(weighted)?);
    }
    let e = g.concat(&scores)?;
    let attention = g.softmax(e)?;
    let context = g.mix(attention, &ctx.descriptors)?;

    let x2 = g.concat(&[context, h1])?;
    let (h2, c2) = params.l2.step(g, store, x2, state.h2, state.c2)?;

    let out_w = g.param(store, &params.name("out.w"))?;
    let out_b = g.param(store, &params.name("out.b"))?;
    let logits = g.affine(out_w, h2, Some(out_b))?;
    let log_probs = g.log_softmax(logits)?;

    Ok(StepOutput {
        state: DecodeState {
            h1,
            c1,
            h2,
            c2,
            step: state.step + 1,
            tokens: state.tokens.clone(),
            log_prob: state.log_prob,
        },
        log_probs,
        attention,
        context,
    })
}

/// Teacher-forced log-probability of a complete caption (BOS … EOS), as a
/// scalar graph node: Σ_t log p(w_t | w_<t).
pub fn score_caption(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderParams,
    ctx: &SceneContext,
    tokens: &[usize],
) -> Result<NodeId> {
    if tokens.len() < 2 || tokens[0] != BOS || *tokens.last().unwrap() != EOS {
        return Err(HipError::Input(
            "caption must start with BOS and end with EOS".into(),
        ));
    }
    score_sequence(g, store, params, ctx, tokens)
}

/// Like [`score_caption`] but without requiring a terminal EOS: sampled
/// captions can hit the length cap mid-sentence yet still need a
/// differentiable log-probability.
pub(crate) fn score_sequence(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderParams,
    ctx: &SceneContext,
    tokens: &[usize],
) -> Result<NodeId> {
    if tokens.len() < 2 || tokens[0] != BOS {
        return Err(HipError::Input(
            "sequence must start with BOS and contain at least one more token".into(),
        ));
    }
    for &t in tokens {
        if t >= params.dims.vocab {
            return Err(HipError::Input(format!(
                "token {t} outside vocabulary of size {}",
                params.dims.vocab
            )));
        }
    }
    let mut state = DecodeState::start(g, params);
    let mut terms = Vec::with_capacity(tokens.len() - 1);
    for window in tokens.windows(2) {
        let out = decode_step(g, store, params, ctx, &state, window[0])?;
        terms.push(g.slice(out.log_probs, window[1], 1)?);
        state = out.state;
        state.advance(window[1], g.value(*terms.last().unwrap())[0]);
    }
    g.add(&terms)
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty distribution")
        .0
}

/// Greedy decode: argmax token each step (ties to the smallest id), until
/// EOS or `max_len` generated tokens.
pub fn greedy_decode(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderParams,
    ctx: &SceneContext,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut state = DecodeState::start(g, params);
    for _ in 0..max_len {
        let prev = *state.tokens.last().unwrap();
        let out = decode_step(g, store, params, ctx, &state, prev)?;
        let lp = g.value(out.log_probs);
        let token = argmax(lp);
        state = out.state;
        state.advance(token, lp[token]);
        if token == EOS {
            break;
        }
    }
    Ok(state.tokens)
}

struct Hypothesis {
    state: DecodeState,
    done: bool,
}

/// Length-capped beam search. Candidates are ranked by total log-prob,
/// ties broken by source hypothesis index then token id; finished
/// hypotheses stay in the pool unextended. `beam` = 1 reproduces
/// [`greedy_decode`] exactly.
pub fn beam_search(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderParams,
    ctx: &SceneContext,
    beam: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(HipError::Input("beam width must be at least 1".into()));
    }
    let mut hyps = vec![Hypothesis {
        state: DecodeState::start(g, params),
        done: false,
    }];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.done) {
            break;
        }
        // (score, source hyp, token or None for already-finished)
        let mut candidates: Vec<(f64, usize, Option<usize>, Option<StepOutput>)> = Vec::new();
        for (idx, hyp) in hyps.iter().enumerate() {
            if hyp.done {
                candidates.push((hyp.state.log_prob, idx, None, None));
                continue;
            }
            let prev = *hyp.state.tokens.last().unwrap();
            let out = decode_step(g, store, params, ctx, &hyp.state, prev)?;
            let lp = g.value(out.log_probs).to_vec();
            for (token, &l) in lp.iter().enumerate() {
                candidates.push((hyp.state.log_prob + l, idx, Some(token), Some(out.clone())));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.unwrap_or(usize::MAX).cmp(&b.2.unwrap_or(usize::MAX)))
        });
        let mut next = Vec::with_capacity(beam);
        for (score, idx, token, out) in candidates.into_iter().take(beam) {
            match token {
                None => next.push(Hypothesis {
                    state: hyps[idx].state.clone(),
                    done: true,
                }),
                Some(token) => {
                    let out = out.expect("expanded candidate carries its step");
                    let mut state = out.state;
                    state.advance(token, score - hyps[idx].state.log_prob);
                    let done = token == EOS;
                    next.push(Hypothesis { state, done });
                }
            }
        }
        let stop = next[0].done; // log-probs only decrease; a finished leader stays best
        hyps = next;
        if stop {
            break;
        }
    }
    Ok(hyps.into_iter().next().expect("at least one hypothesis").state.tokens)
}

/// Samples an index from a log-distribution by inverse CDF.
pub fn sample_index<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1 // rounding slack: all mass consumed
}

/// Ancestral sampling at temperature 1. Returns the token list and its
/// exact log-probability; deterministic for a fixed rng state.
pub fn sample_caption<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderParams,
    ctx: &SceneContext,
    rng: &mut R,
    max_len: usize,
) -> Result<(Vec<usize>, f64)> {
    let mut state = DecodeState::start(g, params);
    for _ in 0..max_len {
        let prev = *state.tokens.last().unwrap();
        let out = decode_step(g, store, params, ctx, &state, prev)?;
        let lp = g.value(out.log_probs);
        let token = sample_index(lp, rng);
        let chosen = lp[token];
        state = out.state;
        state.advance(token, chosen);
        if token == EOS {
            break;
        }
    }
    Ok((state.tokens.clone(), state.log_prob))
}
