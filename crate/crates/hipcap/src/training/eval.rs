//! Caption-quality evaluation of a trained model over a dataset split.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::SceneRecord;
use crate::error::{HipError, Result};
use crate::metrics::{cider_d, corpus_bleu, multilabel_scores, rouge_l, tokenize, Corpus, MultiLabelScores};
use crate::model::Model;
use crate::numerics::{Graph, ParamStore};
use crate::training::recognition::predict_top_k;

/// One scene's decoded caption and its sentence-level scores.
#[derive(Clone, Debug, Serialize)]
pub struct ImageEval {
    pub image_id: String,
    pub caption: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Corpus-level metrics plus per-image detail.
#[derive(Clone, Debug, Serialize)]
pub struct EvaluationReport {
    /// Corpus BLEU@1 through BLEU@4.
    pub bleu: [f64; 4],
    /// Mean sentence-level ROUGE-L.
    pub rouge_l: f64,
    /// Mean per-image CIDEr-D.
    pub cider_d: f64,
    /// Top-3 recognition scores, when the model has a head and the split
    /// carries labels.
    pub recognition: Option<MultiLabelScores>,
    pub per_image: Vec<ImageEval>,
}

/// Decodes every scene with the given beam width and scores the captions.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    records: &[SceneRecord],
    beam: usize,
) -> Result<EvaluationReport> {
    if records.is_empty() {
        return Err(HipError::Input("nothing to evaluate: the split is empty".into()));
    }
    let references: Vec<Vec<Vec<String>>> = records
        .iter()
        .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    let corpus = Corpus::from_references(&references)?;

    let decoded: Vec<Result<(String, Vec<String>)>> = records
        .par_iter()
        .map(|record| {
            let regions = record.to_regions()?;
            let tokens = model.caption(store, &regions, record.edges.as_deref(), beam)?;
            let sentence = model.config.vocab.decode(&tokens);
            let words = tokenize(&sentence);
            Ok((sentence, words))
        })
        .collect();

    let mut candidates = Vec::with_capacity(records.len());
    let mut sentences = Vec::with_capacity(records.len());
    for d in decoded {
        let (sentence, words) = d?;
        sentences.push(sentence);
        candidates.push(words);
    }

    let mut bleu = [0.0; 4];
    for (n, slot) in bleu.iter_mut().enumerate() {
        *slot = corpus_bleu(&candidates, &references, n + 1)?;
    }

    let mut per_image = Vec::with_capacity(records.len());
    let mut rouge_total = 0.0;
    let mut cider_total = 0.0;
    for i in 0..records.len() {
        let r = rouge_l(&candidates[i], &references[i])?;
        let c = cider_d(&candidates[i], &references[i], &corpus)?;
        let b = crate::metrics::bleu(&candidates[i], &references[i], 4)?;
        rouge_total += r;
        cider_total += c;
        per_image.push(ImageEval {
            image_id: records[i].image_id.clone(),
            caption: sentences[i].clone(),
            bleu4: b,
            rouge_l: r,
            cider_d: c,
        });
    }

    let recognition = recognition_scores(model, store, records)?;

    Ok(EvaluationReport {
        bleu,
        rouge_l: rouge_total / records.len() as f64,
        cider_d: cider_total / records.len() as f64,
        recognition,
        per_image,
    })
}

/// Top-3 recognition metrics over the labeled scenes, or None when the
/// model has no head or no scene is labeled.
fn recognition_scores(
    model: &Model,
    store: &ParamStore,
    records: &[SceneRecord],
) -> Result<Option<MultiLabelScores>> {
    let classes = match model.config.recognition_classes {
        Some(c) => c,
        None => return Ok(None),
    };
    let labeled: Vec<&SceneRecord> = records.iter().filter(|r| r.labels.is_some()).collect();
    if labeled.is_empty() {
        return Ok(None);
    }
    let predictions: Vec<Result<Vec<usize>>> = labeled
        .par_iter()
        .map(|record| {
            let regions = record.to_regions()?;
            let mut g = Graph::new();
            let scene = model.prepare_scene(&mut g, store, &regions, record.edges.as_deref())?;
            let logits = model.recognition_logits(&mut g, store, &scene)?;
            Ok(predict_top_k(g.value(logits), 3))
        })
        .collect();
    let mut predicted = Vec::with_capacity(labeled.len());
    for p in predictions {
        predicted.push(p?);
    }
    let truth: Vec<Vec<usize>> = labeled
        .iter()
        .map(|r| r.labels.clone().expect("filtered to labeled"))
        .collect();
    Ok(Some(multilabel_scores(&predicted, &truth, classes)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sceneworld, SceneWorldConfig, Vocab, SHAPES};
    use crate::model::ModelConfig;

    fn setup(with_head: bool) -> (Vec<SceneRecord>, Model, ParamStore) {
        let records = generate_sceneworld(&SceneWorldConfig {
            n_scenes: 3,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocab::build(&records, 1).unwrap();
        let config = ModelConfig {
            h_enc: 8,
            h_dec: 8,
            d_word: 4,
            d_attn: 4,
            max_len: 10,
            recognition_classes: with_head.then_some(SHAPES.len()),
            ..ModelConfig::new(vocab, 16)
        };
        let (model, store) = Model::new(config, 33).unwrap();
        (records, model, store)
    }

    #[test]
    fn report_covers_every_image_with_metrics_in_range() {
        let (records, model, store) = setup(false);
        let report = evaluate(&model, &store, &records, 2).unwrap();
        assert_eq!(report.per_image.len(), records.len());
        for n in 0..4 {
            assert!((0.0..=1.0).contains(&report.bleu[n]), "bleu{} = {}", n + 1, report.bleu[n]);
        }
        assert!((0.0..=1.0).contains(&report.rouge_l));
        assert!(report.cider_d >= 0.0 && report.cider_d <= 10.0);
        assert!(report.recognition.is_none());
        for img in &report.per_image {
            assert!(!img.image_id.is_empty());
            assert!((0.0..=1.0).contains(&img.rouge_l));
        }
    }

    #[test]
    fn recognition_metrics_appear_with_a_head_and_labels() {
        let (records, model, store) = setup(true);
        let report = evaluate(&model, &store, &records, 1).unwrap();
        let scores = report.recognition.expect("head + labels should produce scores");
        assert!(scores.o_f1 >= 0.0 && scores.o_f1 <= 1.0);

        let mut unlabeled = records.clone();
        for r in &mut unlabeled {
            r.labels = None;
        }
        let report = evaluate(&model, &store, &unlabeled, 1).unwrap();
        assert!(report.recognition.is_none());
    }

    #[test]
    fn report_serializes_to_json() {
        let (records, model, store) = setup(false);
        let report = evaluate(&model, &store, &records, 1).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"bleu\""));
        assert!(json.contains("\"per_image\""));
    }

    #[test]
    fn empty_split_is_rejected() {
        let (_, model, store) = setup(false);
        assert!(evaluate(&model, &store, &[], 1).is_err());
    }
}
