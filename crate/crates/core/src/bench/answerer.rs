use serde::{Deserialize, Serialize};

use numcore::{AdamWConfig, OptimState, ParamStore, StreamKey, Tape, Tensor};

use crate::error::{Error, Result};
use crate::evaluator::pretrain::lr_at;
use crate::nn::{Builder, Net};
use crate::sceneworld::{answer_from_attributes, extract_attributes, ContextPair, Image, IMAGE_SIZE};
use crate::vocab::{vocab_size, Token};

/// Scores yes/no questions about an image; a positive score means yes.
pub trait Answerer: Sync {
    fn name(&self) -> &str;

    fn scores(&self, image: &Image, questions: &[&[Token]]) -> Result<Vec<f64>>;

    fn score(&self, image: &Image, question: &[Token]) -> Result<f64> {
        Ok(self.scores(image, &[question])?[0])
    }
}

/// Attribute extraction followed by template evaluation, scoring +1 / -1.
pub struct RasterOracle;

impl Answerer for RasterOracle {
    fn name(&self) -> &str {
        "raster_oracle"
    }

    fn scores(&self, image: &Image, questions: &[&[Token]]) -> Result<Vec<f64>> {
        let attrs = extract_attributes(image);
        questions
            .iter()
            .map(|q| Ok(answer_from_attributes(q, &attrs)?.score()))
            .collect()
    }
}

const VIEW: usize = IMAGE_SIZE / 2;
const VIEW_LEN: usize = VIEW * VIEW * 3;
const QUESTION_SLOTS: usize = 8;
const HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuralAnswererConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of flipping each training label.
    pub label_noise: f64,
    /// Leading training contexts used.
    pub contexts: usize,
}

impl Default for NeuralAnswererConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            lr: 3e-3,
            label_noise: 0.05,
            contexts: 4000,
        }
    }
}

/// Small MLP over a 2x2-averaged 16x16 view and slot-wise question
/// embeddings, returning `logit(yes) - logit(no)`.
#[derive(Clone, Debug)]
pub struct NeuralAnswerer {
    pub params: ParamStore,
}

fn view(image: &Image) -> Vec<f64> {
    let mut out = Vec::with_capacity(VIEW_LEN);
    for r in 0..VIEW {
        for c in 0..VIEW {
            for ch in 0..3 {
                let mut s = 0.0;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s += image.get(2 * r + dr, 2 * c + dc)[ch];
                }
                out.push(s / 4.0);
            }
        }
    }
    out
}

fn slot_ids(question: &[Token]) -> Result<Vec<usize>> {
    if question.len() > QUESTION_SLOTS {
        return Err(Error::Eval(format!("question longer than {QUESTION_SLOTS} tokens")));
    }
    let v = vocab_size();
    Ok((0..QUESTION_SLOTS)
        .map(|k| k * v + question.get(k).map_or(0, |t| t.id()))
        .collect())
}

fn logits(net: &mut Net, views: Tensor, ids: &[usize]) -> Result<numcore::Var> {
    let x = net.tape.constant(views);
    let h = net.linear("answerer.image", x)?;
    let table = net.p("answerer.slots")?;
    let e = net.tape.embedding(table, ids)?;
    let q = net.tape.block_mean_rows(e, QUESTION_SLOTS)?;
    let h = net.tape.add(h, q)?;
    let h = net.tape.gelu(h)?;
    let h = net.linear("answerer.hidden", h)?;
    let h = net.tape.gelu(h)?;
    net.linear("answerer.out", h)
}

impl NeuralAnswerer {
    pub fn init(key: StreamKey) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, key.child("answerer").stream());
        b.linear("answerer.image", VIEW_LEN, HIDDEN)?;
        b.tensor("answerer.slots", [QUESTION_SLOTS * vocab_size(), HIDDEN], 0.5)?;
        b.linear("answerer.hidden", HIDDEN, HIDDEN)?;
        b.linear("answerer.out", HIDDEN, 2)?;
        Ok(Self { params })
    }

    /// Trains on both questions of every context against the reference
    /// image, with labels flipped at rate `label_noise`.
    pub fn train(contexts: &[ContextPair], cfg: &NeuralAnswererConfig, key: StreamKey) -> Result<Self> {
        if contexts.is_empty() || cfg.batch_size == 0 || !(0.0..=0.5).contains(&cfg.label_noise) {
            return Err(Error::Config("answerer training needs contexts, a batch size and label_noise in [0, 0.5]".into()));
        }
        let contexts = &contexts[..cfg.contexts.clamp(1, contexts.len())];
        let mut model = Self::init(key)?;
        let mut examples = Vec::with_capacity(contexts.len() * 2);
        let mut noise = key.child("label_noise").stream();
        for c in contexts {
            let v = view(&c.image());
            for g in c.questions() {
                let truth = g.parsed()?.answer_for(&c.scene).is_yes();
                let label = truth ^ (noise.uniform() < cfg.label_noise);
                examples.push((v.clone(), slot_ids(&g.question)?, usize::from(label)));
            }
        }
        let mut opt = OptimState::new(AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        });
        let mut pick = key.child("pick").stream();
        for step in 0..cfg.steps {
            opt.config.lr = lr_at(cfg.lr, step, cfg.steps / 20, cfg.steps);
            let batch: Vec<usize> = (0..cfg.batch_size).map(|_| pick.below(examples.len())).collect();
            let views = batch.iter().flat_map(|&i| examples[i].0.iter().copied()).collect();
            let ids: Vec<usize> = batch.iter().flat_map(|&i| examples[i].1.iter().copied()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| examples[i].2).collect();
            let mut tape = Tape::new();
            let mut net = Net::new(&mut tape, &model.params);
            let l = logits(&mut net, Tensor::new([batch.len(), VIEW_LEN], views)?, &ids)?;
            let loss = tape.cross_entropy_rows(l, &targets)?;
            let grads = tape.backward(loss)?.params(&tape);
            opt.step(&mut model.params, &grads)?;
        }
        model.params.round_to_f32();
        Ok(model)
    }
}

impl Answerer for NeuralAnswerer {
    fn name(&self) -> &str {
        "neural"
    }

    fn scores(&self, image: &Image, questions: &[&[Token]]) -> Result<Vec<f64>> {
        let v = view(image);
        let n = questions.len();
        let views = (0..n).flat_map(|_| v.iter().copied()).collect();
        let mut ids = Vec::with_capacity(n * QUESTION_SLOTS);
        for q in questions {
            ids.extend(slot_ids(q)?);
        }
        let mut tape = Tape::no_grad();
        let mut net = Net::new(&mut tape, &self.params);
        let l = logits(&mut net, Tensor::new([n, VIEW_LEN], views)?, &ids)?;
        let l = tape.value(l);
        Ok((0..n).map(|i| l.get2(i, 1) - l.get2(i, 0)).collect())
    }
}
