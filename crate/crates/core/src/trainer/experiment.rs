use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    apply_ablation, evaluate, train, AblationMode, EvalReport, Example, TrainConfig, TrainError,
    TrainOutcome,
};
use crate::concepts::ConceptVocabulary;
use crate::instructor::Lexicon;
use crate::machine::{ModelConfig, ModelInput, NsmModel};
use crate::synthgen::{answer_vocabulary, stream_seed, Dataset, Split};
use crate::worldgraph::SceneGraph;

const DOMAIN_VALIDATION: u64 = 13;

/// Everything needed to turn dataset records into model inputs for one
/// model configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: ConceptVocabulary,
    pub lexicon: Lexicon,
    pub graphs: Vec<SceneGraph>,
    pub model_config: ModelConfig,
}

impl Prepared {
    pub fn new(
        data: &Dataset,
        config: &TrainConfig,
        ablation: AblationMode,
    ) -> Result<Self, TrainError> {
        let (vocab, lexicon) = data.embeddings_for(config.dim)?;
        let base = ModelConfig {
            dim: config.dim,
            steps: config.steps,
            ablation: AblationMode::Full,
            dropout: config.dropout,
            answers: answer_vocabulary(&vocab),
            group_sizes: vocab.group_sizes(),
            tokens: lexicon.len(),
            dense_dim: None,
            seed: config.seed,
        };
        let (model_config, graphs) = apply_ablation(&base, &data.graphs, ablation)?;
        Ok(Self {
            vocab,
            lexicon,
            graphs,
            model_config,
        })
    }

    pub fn model(&self) -> Result<NsmModel, TrainError> {
        Ok(NsmModel::new(
            self.model_config.clone(),
            &self.vocab,
            &self.lexicon,
        )?)
    }

    pub fn examples(&self, data: &Dataset, ids: &[usize]) -> Result<Vec<Example>, TrainError> {
        let answers = &self.model_config.answers;
        ids.par_iter()
            .map(|&id| {
                let q = data
                    .questions
                    .get(id)
                    .ok_or_else(|| TrainError::Config(format!("question {id} does not exist")))?;
                let graph = &self.graphs[q.graph_id];
                Ok(Example {
                    id,
                    input: ModelInput::new(&self.lexicon, &self.vocab, &q.text, graph)?,
                    answer: q.answer.clone(),
                    target: answers.iter().position(|a| *a == q.answer),
                    hop_count: q.hop_count,
                    template: q.template.clone(),
                })
            })
            .collect()
    }
}

/// Seeded split of training ids into `(fit, validation)`.
pub fn carve_validation(ids: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
        seed,
        DOMAIN_VALIDATION,
        0,
    )));
    let n_valid = ((ids.len() as f64 * fraction).round() as usize)
        .clamp(1, ids.len().saturating_sub(1).max(1));
    let mut valid = shuffled.split_off(shuffled.len() - n_valid);
    shuffled.sort_unstable();
    valid.sort_unstable();
    (shuffled, valid)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub test: EvalReport,
    pub ablation: AblationMode,
}

/// Trains one model on `split.train` (minus a validation carve-out) and
/// scores its EMA weights on `split.test`.
pub fn run_experiment(
    data: &Dataset,
    split: &Split,
    config: &TrainConfig,
    ablation: AblationMode,
) -> Result<ExperimentResult, TrainError> {
    config.validate()?;
    let prepared = Prepared::new(data, config, ablation)?;
    let (fit_ids, valid_ids) =
        carve_validation(&split.train, config.validation_fraction, config.seed);
    let fit = prepared.examples(data, &fit_ids)?;
    let valid = prepared.examples(data, &valid_ids)?;
    let test = prepared.examples(data, &split.test)?;
    let outcome = train(prepared.model()?, &fit, &valid, config)?;
    let model = outcome.checkpoint.model()?;
    let report = evaluate(&model, &outcome.checkpoint.ema, &test)?;
    Ok(ExperimentResult {
        outcome,
        test: report,
        ablation,
    })
}
