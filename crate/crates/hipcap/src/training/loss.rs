//! Differentiable batch losses.
//!
//! Scenes have different tree shapes, so each scene gets its own graph;
//! graphs run in parallel, and their parameter gradients merge into the
//! shared store serially, in scene order, which keeps accumulation
//! deterministic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SceneRecord;
use crate::decoder::{greedy_decode, sample_caption, score_sequence};
use crate::error::{HipError, Result};
use crate::metrics::{cider_d, tokenize, Corpus};
use crate::model::Model;
use crate::numerics::{Graph, ParamStore};

use super::recognition::recognition_loss;

type Grads = Vec<(String, Vec<f64>)>;

fn merge_scaled(store: &mut ParamStore, grads: Grads, scale: f64) -> Result<()> {
    for (name, grad) in grads {
        let scaled: Vec<f64> = grad.iter().map(|g| g * scale).collect();
        store.accumulate_grad(&name, &scaled)?;
    }
    Ok(())
}

/// Mean over every (scene, caption) pair of −log Pr(caption | scene).
/// Gradients of the mean are accumulated into the store; the loss value is
/// returned.
pub fn ce_batch(model: &Model, store: &mut ParamStore, batch: &[&SceneRecord]) -> Result<f64> {
    if batch.is_empty() {
        return Err(HipError::Input("cross-entropy batch is empty".into()));
    }
    let pairs: usize = batch.iter().map(|r| r.captions.len()).sum();
    if pairs == 0 {
        return Err(HipError::Input("cross-entropy batch has no captions".into()));
    }
    let per_scene: Vec<Result<(f64, Grads)>> = batch
        .par_iter()
        .map(|record| scene_ce(model, store, record))
        .collect();
    let weight = 1.0 / pairs as f64;
    let mut total = 0.0;
    for result in per_scene {
        let (value, grads) = result?;
        total += value;
        merge_scaled(store, grads, weight)?;
    }
    Ok(total * weight)
}

/// Sum of −log-probabilities of one scene's captions, with its gradients.
fn scene_ce(model: &Model, store: &ParamStore, record: &SceneRecord) -> Result<(f64, Grads)> {
    let regions = record.to_regions()?;
    let mut g = Graph::new();
    let scene = model.prepare_scene(&mut g, store, &regions, record.edges.as_deref())?;
    let mut scores = Vec::with_capacity(record.captions.len());
    for caption in &record.captions {
        let tokens = model.config.vocab.encode(caption);
        scores.push(model.score(&mut g, store, &scene, &tokens)?);
    }
    if scores.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let total = g.add(&scores)?;
    let loss = g.scale(total, -1.0)?;
    let grads = g.param_grads(loss)?;
    Ok((g.value(loss)[0], grads))
}

/// Weighted mean recognition loss over the labeled scenes of a batch,
/// accumulated into the store. Scenes without labels contribute nothing;
/// a batch with no labeled scene is a no-op.
pub fn recognition_batch(
    model: &Model,
    store: &mut ParamStore,
    batch: &[&SceneRecord],
    weight: f64,
) -> Result<f64> {
    let classes = match model.config.recognition_classes {
        Some(c) => c,
        None => return Err(HipError::State("model has no recognition head".into())),
    };
    let labeled: Vec<&&SceneRecord> = batch.iter().filter(|r| r.labels.is_some()).collect();
    if labeled.is_empty() {
        return Ok(0.0);
    }
    let per_scene: Vec<Result<(f64, Grads)>> = labeled
        .par_iter()
        .map(|record| {
            let regions = record.to_regions()?;
            let mut g = Graph::new();
            let scene = model.prepare_scene(&mut g, store, &regions, record.edges.as_deref())?;
            let logits = model.recognition_logits(&mut g, store, &scene)?;
            let labels = record.labels.as_deref().expect("filtered to labeled");
            let loss = recognition_loss(&mut g, logits, labels, classes)?;
            let grads = g.param_grads(loss)?;
            Ok((g.value(loss)[0], grads))
        })
        .collect();
    let scale = weight / labeled.len() as f64;
    let mut total = 0.0;
    for result in per_scene {
        let (value, grads) = result?;
        total += value;
        merge_scaled(store, grads, scale)?;
    }
    Ok(total * scale)
}

/// One self-critical policy-gradient step over a batch.
///
/// Per scene: sample a caption (log-probability L), decode greedily, and
/// take the CIDEr-D gap r = score(sampled) − score(greedy) as the reward.
/// The gradient of −r·L is accumulated for every scene (r treated as a
/// constant); returns (Σ −r·L, mean reward).
pub fn scst_step(
    model: &Model,
    store: &mut ParamStore,
    batch: &[&SceneRecord],
    corpus: &Corpus,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(HipError::Input("self-critical batch is empty".into()));
    }
    // Sub-seeds are drawn serially so the parallel section cannot reorder
    // random draws between runs.
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let per_scene: Vec<Result<(f64, f64, Option<Grads>)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(record, &seed)| scene_scst(model, store, record, corpus, seed))
        .collect();
    let mut pseudo_loss = 0.0;
    let mut reward_total = 0.0;
    for result in per_scene {
        let (reward, log_prob, grads) = result?;
        reward_total += reward;
        pseudo_loss -= reward * log_prob;
        if let Some(grads) = grads {
            merge_scaled(store, grads, -reward)?;
        }
    }
    Ok((pseudo_loss, reward_total / batch.len() as f64))
}

fn scene_scst(
    model: &Model,
    store: &ParamStore,
    record: &SceneRecord,
    corpus: &Corpus,
    seed: u64,
) -> Result<(f64, f64, Option<Grads>)> {
    let regions = record.to_regions()?;
    let mut g = Graph::new();
    let scene = model.prepare_scene(&mut g, store, &regions, record.edges.as_deref())?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    let (sampled, log_prob) = sample_caption(
        &mut g,
        store,
        model.decoder(),
        &scene.ctx,
        &mut sample_rng,
        model.config.max_len,
    )?;
    let greedy = greedy_decode(&mut g, store, model.decoder(), &scene.ctx, model.config.max_len)?;

    let references: Vec<Vec<String>> = record.captions.iter().map(|c| tokenize(c)).collect();
    let vocab = &model.config.vocab;
    let sampled_words = tokenize(&vocab.decode(&sampled));
    let greedy_words = tokenize(&vocab.decode(&greedy));
    let reward = cider_d(&sampled_words, &references, corpus)?
        - cider_d(&greedy_words, &references, corpus)?;
    if reward == 0.0 {
        return Ok((0.0, log_prob, None));
    }
    let score = score_sequence(&mut g, store, model.decoder(), &scene.ctx, &sampled)?;
    let grads = g.param_grads(score)?;
    Ok((reward, log_prob, Some(grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sceneworld, SceneWorldConfig, Vocab, EOS};
    use crate::model::ModelConfig;
    use crate::numerics::{adam_step, AdamConfig};

    fn setup(n: usize, seed: u64) -> (Vec<SceneRecord>, Model, ParamStore) {
        let records = generate_sceneworld(&SceneWorldConfig {
            n_scenes: n,
            seed,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocab::build(&records, 1).unwrap();
        let config = ModelConfig {
            h_enc: 10,
            h_dec: 10,
            d_word: 5,
            d_attn: 5,
            max_len: 12,
            ..ModelConfig::new(vocab, 16)
        };
        let (model, store) = Model::new(config, seed).unwrap();
        (records, model, store)
    }

    fn zero_param(store: &mut ParamStore, name: &str) {
        for v in store.get_mut(name).unwrap().values_mut() {
            *v = 0.0;
        }
    }

    #[test]
    fn uniform_head_gives_token_count_times_log_vocab() {
        let (records, model, mut store) = setup(1, 1);
        zero_param(&mut store, "dec.out.w");
        zero_param(&mut store, "dec.out.b");
        let record = &records[0];
        let v = model.config.vocab.len() as f64;
        let predicted: usize = record
            .captions
            .iter()
            .map(|c| model.config.vocab.encode(c).len() - 1)
            .sum();
        let pairs = record.captions.len() as f64;
        let expected = predicted as f64 * v.ln() / pairs;
        let loss = ce_batch(&model, &mut store, &[record]).unwrap();
        assert!(
            (loss - expected).abs() < 1e-12,
            "loss {loss} vs expected {expected}"
        );
    }

    #[test]
    fn one_adam_step_descends() {
        let (records, model, mut store) = setup(1, 2);
        let batch: Vec<&SceneRecord> = records.iter().collect();
        let before = {
            let loss = ce_batch(&model, &mut store, &batch).unwrap();
            store.fill_missing_grads();
            adam_step(&mut store, &AdamConfig::with_lr(1e-3)).unwrap();
            loss
        };
        store.zero_grads();
        let after = ce_batch(&model, &mut store, &batch).unwrap();
        assert!(after <= before + 1e-12, "loss rose: {before} -> {after}");
    }

    #[test]
    fn duplicating_the_batch_changes_nothing() {
        let (records, model, mut store) = setup(2, 3);
        let single: Vec<&SceneRecord> = records.iter().collect();
        let double: Vec<&SceneRecord> = records.iter().chain(records.iter()).collect();

        let loss_single = ce_batch(&model, &mut store, &single).unwrap();
        let grads_single: Vec<(String, Vec<f64>)> = store
            .iter()
            .filter_map(|(n, t)| t.grad().map(|g| (n.to_string(), g.to_vec())))
            .collect();
        store.zero_grads();

        let loss_double = ce_batch(&model, &mut store, &double).unwrap();
        assert!((loss_single - loss_double).abs() < 1e-12);
        for (name, grad) in &grads_single {
            let doubled = store.get(name).unwrap().grad().unwrap();
            for (a, b) in grad.iter().zip(doubled) {
                assert!((a - b).abs() < 1e-9, "{name} gradient moved: {a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_batches_are_rejected() {
        let (records, model, mut store) = setup(1, 4);
        assert!(ce_batch(&model, &mut store, &[]).is_err());
        let mut no_captions = records[0].clone();
        no_captions.captions.clear();
        assert!(ce_batch(&model, &mut store, &[&no_captions]).is_err());
        let refs: Vec<Vec<Vec<String>>> = vec![vec![vec!["a".to_string()]]];
        let corpus = Corpus::from_references(&refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(scst_step(&model, &mut store, &[], &corpus, &mut rng).is_err());
    }

    #[test]
    fn scst_matches_manual_gradient_assembly() {
        let (records, model, mut store) = setup(2, 5);
        let refs: Vec<Vec<Vec<String>>> = records
            .iter()
            .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
            .collect();
        let corpus = Corpus::from_references(&refs).unwrap();
        let batch: Vec<&SceneRecord> = records.iter().collect();

        // Manual pass: replicate the seed draws, then accumulate −r·∇L
        // scene by scene with the same public pieces.
        let mut manual = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut manual_pseudo = 0.0;
        let mut rewards = Vec::new();
        for record in &batch {
            let seed: u64 = rng.random();
            let regions = record.to_regions().unwrap();
            let mut g = Graph::new();
            let scene = model.prepare_scene(&mut g, &manual, &regions, record.edges.as_deref()).unwrap();
            let mut srng = ChaCha8Rng::seed_from_u64(seed);
            let (sampled, log_prob) = sample_caption(
                &mut g,
                &manual,
                model.decoder(),
                &scene.ctx,
                &mut srng,
                model.config.max_len,
            )
            .unwrap();
            let greedy =
                greedy_decode(&mut g, &manual, model.decoder(), &scene.ctx, model.config.max_len).unwrap();
            let srefs: Vec<Vec<String>> = record.captions.iter().map(|c| tokenize(c)).collect();
            let vocab = &model.config.vocab;
            let r = cider_d(&tokenize(&vocab.decode(&sampled)), &srefs, &corpus).unwrap()
                - cider_d(&tokenize(&vocab.decode(&greedy)), &srefs, &corpus).unwrap();
            rewards.push(r);
            manual_pseudo -= r * log_prob;
            if r != 0.0 {
                let score = score_sequence(&mut g, &manual, model.decoder(), &scene.ctx, &sampled).unwrap();
                for (name, grad) in g.param_grads(score).unwrap() {
                    let scaled: Vec<f64> = grad.iter().map(|v| v * -r).collect();
                    manual.accumulate_grad(&name, &scaled).unwrap();
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (pseudo, mean_reward) = scst_step(&model, &mut store, &batch, &corpus, &mut rng).unwrap();
        assert!((pseudo - manual_pseudo).abs() < 1e-12);
        let expected_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        assert!((mean_reward - expected_mean).abs() < 1e-12);
        for (name, tensor) in store.iter() {
            match (tensor.grad(), manual.get(name).unwrap().grad()) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        assert!((x - y).abs() < 1e-12, "{name} differs: {x} vs {y}");
                    }
                }
                _ => panic!("{name}: gradient presence differs between paths"),
            }
        }
    }

    #[test]
    fn sampled_equal_to_greedy_contributes_nothing() {
        let (records, model, mut store) = setup(1, 6);
        // A huge EOS bias makes the first emitted token EOS almost surely,
        // for sampling and greedy alike, so the reward gap is exactly zero.
        store.get_mut("dec.out.b").unwrap().values_mut()[EOS] = 50.0;
        let refs: Vec<Vec<Vec<String>>> = records
            .iter()
            .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
            .collect();
        let corpus = Corpus::from_references(&refs).unwrap();
        let batch: Vec<&SceneRecord> = records.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pseudo, mean_reward) = scst_step(&model, &mut store, &batch, &corpus, &mut rng).unwrap();
        assert_eq!(pseudo, 0.0);
        assert_eq!(mean_reward, 0.0);
        assert!(store.iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn recognition_batch_means_over_labeled_scenes() {
        let (records, _, _) = setup(2, 7);
        let vocab = Vocab::build(&records, 1).unwrap();
        let config = ModelConfig {
            h_enc: 10,
            h_dec: 10,
            d_word: 5,
            d_attn: 5,
            recognition_classes: Some(6),
            ..ModelConfig::new(vocab, 16)
        };
        let (model, mut store) = Model::new(config, 7).unwrap();
        let batch: Vec<&SceneRecord> = records.iter().collect();
        let loss = recognition_batch(&model, &mut store, &batch, 1.0).unwrap();
        assert!(loss > 0.0);
        assert!(store.get("rec.w").unwrap().grad().is_some());

        // Stripping the labels turns the pass into a no-op.
        store.zero_grads();
        let mut unlabeled: Vec<SceneRecord> = records.clone();
        for r in &mut unlabeled {
            r.labels = None;
        }
        let batch: Vec<&SceneRecord> = unlabeled.iter().collect();
        assert_eq!(recognition_batch(&model, &mut store, &batch, 1.0).unwrap(), 0.0);
        assert!(store.iter().all(|(_, t)| t.grad().is_none()));
    }
}
