//! Leader-identification adversaries.
//!
//! [`AdversaryParams`] runs one shared LSTM per agent over that agent's
//! planar position and scores every hidden state against a learned
//! embedding, so the same weights serve any team size. [`FlatLstmParams`]
//! is the fixed-size baseline reading all positions at once.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Vec2;
use crate::error::{Error, Result};
use crate::numcore::{
    clip_grad_norm, collect_grads, lstm_step, mlp_forward, softmax, Activation, Checkpoint,
    LstmParams, MlpParams, Parameters, SgdMomentum, Tape, Tensor, Var,
};
use crate::policy::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub hidden: usize,
    /// Timesteps with index below this are excluded from the loss.
    pub burn_in: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_episodes: usize,
    pub epochs: usize,
    pub max_grad_norm: f64,
    pub train_fraction: f64,
    /// Subtract the team centroid of the first observation from all inputs.
    pub centroid_shift: bool,
    pub flat_hidden: usize,
    /// Train on randomly rotated and mirrored copies of each episode.
    pub augment: bool,
    pub seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            hidden: 14,
            burn_in: 2,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_episodes: 16,
            epochs: 1000,
            max_grad_norm: 1.0,
            train_fraction: 0.8,
            centroid_shift: true,
            flat_hidden: 19,
            augment: true,
            seed: 0,
        }
    }
}

/// One recorded episode: `positions[t][agent]` after each environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub n: usize,
    pub horizon: usize,
    pub leader: usize,
    pub positions: Vec<Vec<Vec2>>,
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.leader >= self.n {
            return Err(Error::arg(format!("leader {} >= n {}", self.leader, self.n)));
        }
        if self.positions.len() != self.horizon {
            return Err(Error::arg(format!(
                "{} position frames for horizon {}",
                self.positions.len(),
                self.horizon
            )));
        }
        if self.positions.iter().any(|frame| frame.len() != self.n) {
            return Err(Error::arg("frame with the wrong number of agents"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryDataset {
    pub episodes: Vec<EpisodeRecord>,
}

impl TrajectoryDataset {
    pub fn new(episodes: Vec<EpisodeRecord>) -> Result<Self> {
        let ds = Self { episodes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.episodes {
            e.validate()?;
        }
        if let Some(first) = self.episodes.first() {
            if self.episodes.iter().any(|e| e.horizon != first.horizon) {
                return Err(Error::arg("episodes with different horizons in one dataset"));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.horizon)
    }

    /// True when every episode has the same leader index.
    pub fn has_degenerate_labels(&self) -> bool {
        self.episodes
            .windows(2)
            .all(|w| w[0].leader == w[1].leader)
    }

    /// Seeded split by episode into (train, held-out).
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let pick = |ids: &[usize]| Self {
            episodes: ids.iter().map(|&i| self.episodes[i].clone()).collect(),
        };
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }

    /// Copy with leader labels permuted across episodes (no-signal control).
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = self.episodes.iter().map(|e| e.leader).collect();
        labels.shuffle(&mut rng);
        let episodes = self
            .episodes
            .iter()
            .zip(labels)
            .map(|(e, l)| EpisodeRecord {
                leader: l.min(e.n - 1),
                ..e.clone()
            })
            .collect();
        Self { episodes }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.episodes {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        crate::numcore::checkpoint::write_atomic(path, &out)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut episodes = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ep: EpisodeRecord = serde_json::from_str(&line)
                .map_err(|e| Error::integrity(path, format!("line {}: {e}", i + 1)))?;
            episodes.push(ep);
        }
        let ds = Self { episodes };
        ds.validate()
            .map_err(|e| Error::integrity(path, e.to_string()))?;
        Ok(ds)
    }

    pub fn append_jsonl(path: &Path, episode: &EpisodeRecord) -> Result<()> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut line = serde_json::to_vec(episode)?;
        line.push(b'\n');
        file.write_all(&line).map_err(|e| Error::io(path, e))
    }
}

fn centroid(frame: &[Vec2]) -> Vec2 {
    let n = frame.len() as f64;
    let (x, y) = frame
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [x / n, y / n]
}

/// Scalable-LSTM adversary weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryParams {
    /// Input width 2: one agent's planar position.
    pub lstm: LstmParams,
    /// Adversary embedding scored against each agent's hidden state.
    pub embedding: Tensor,
    pub centroid_shift: bool,
}

impl AdversaryParams {
    pub fn init(rng: &mut impl Rng, hidden: usize, centroid_shift: bool) -> Self {
        let lstm = LstmParams::init(rng, 2, hidden);
        let limit = (6.0 / (hidden + 1) as f64).sqrt();
        let embedding = Tensor::vector((0..hidden).map(|_| rng.random_range(-limit..=limit)).collect());
        Self {
            lstm,
            embedding,
            centroid_shift,
        }
    }

    pub fn new(lstm: LstmParams, embedding: Tensor, centroid_shift: bool) -> Result<Self> {
        if lstm.input_width() != 2 {
            return Err(Error::dim("AdversaryParams", "LSTM input width must be 2"));
        }
        if embedding.len() != lstm.hidden() {
            return Err(Error::dim(
                "AdversaryParams",
                format!("embedding width {} vs hidden {}", embedding.len(), lstm.hidden()),
            ));
        }
        Ok(Self {
            lstm,
            embedding,
            centroid_shift,
        })
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn to_checkpoint(&self, config_snapshot: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new("adversary", config_snapshot);
        ck.config["centroid_shift"] = self.centroid_shift.into();
        ck.insert_group(
            "lstm",
            [
                ("w_input".to_string(), &self.lstm.w_input),
                ("w_hidden".to_string(), &self.lstm.w_hidden),
                ("bias".to_string(), &self.lstm.bias),
            ],
        );
        ck.insert_group("embedding", [("v".to_string(), &self.embedding)]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("adversary")?;
        let [w_input, w_hidden, bias]: [Tensor; 3] = ck
            .group("lstm")?
            .try_into()
            .map_err(|_| Error::dim("adversary checkpoint", "lstm group needs 3 tensors"))?;
        let embedding = ck
            .group("embedding")?
            .into_iter()
            .next()
            .ok_or_else(|| Error::dim("adversary checkpoint", "empty embedding group"))?;
        let shift = ck.config["centroid_shift"].as_bool().unwrap_or(true);
        Self::new(LstmParams::new(w_input, w_hidden, bias)?, embedding, shift)
    }
}

impl Parameters for AdversaryParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.lstm.tensors();
        t.push(&self.embedding);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.lstm.tensors_mut();
        t.push(&mut self.embedding);
        t
    }
}

/// Running belief over which agent leads.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryBeliefState {
    /// `[n, hidden]`
    pub hidden: Tensor,
    /// `[n, hidden]`
    pub cell: Tensor,
    pub probs: Vec<f64>,
    pub prediction: usize,
    pub steps: usize,
    origin: Option<Vec2>,
}

impl AdversaryBeliefState {
    pub fn n(&self) -> usize {
        self.probs.len()
    }
}

pub fn belief_init(params: &AdversaryParams, n: usize) -> Result<AdversaryBeliefState> {
    if n < 2 {
        return Err(Error::arg(format!("need at least 2 agents, got {n}")));
    }
    let h = params.hidden();
    Ok(AdversaryBeliefState {
        hidden: Tensor::zeros(&[n, h]),
        cell: Tensor::zeros(&[n, h]),
        probs: vec![1.0 / n as f64; n],
        prediction: 0,
        steps: 0,
        origin: None,
    })
}

/// Feeds one frame of positions through the per-agent LSTM passes.
pub fn belief_step(
    params: &AdversaryParams,
    belief: &AdversaryBeliefState,
    positions: &[Vec2],
) -> Result<AdversaryBeliefState> {
    let n = belief.n();
    if positions.len() != n {
        return Err(Error::arg(format!(
            "belief tracks {n} agents but got {} positions",
            positions.len()
        )));
    }
    let origin = match belief.origin {
        Some(o) => o,
        None if params.centroid_shift => centroid(positions),
        None => [0.0, 0.0],
    };
    let x = Tensor::matrix(
        n,
        2,
        positions
            .iter()
            .flat_map(|p| [p[0] - origin[0], p[1] - origin[1]])
            .collect(),
    );
    let (hidden, cell) = params.lstm.step_values(&x, &belief.hidden, &belief.cell)?;
    let scores = Tensor::vector(
        (0..n)
            .map(|i| {
                hidden
                    .row(i)
                    .iter()
                    .zip(params.embedding.data())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect(),
    );
    let probs = softmax(&scores)?.into_data();
    let prediction = argmax(&probs);
    Ok(AdversaryBeliefState {
        hidden,
        cell,
        probs,
        prediction,
        steps: belief.steps + 1,
        origin: Some(origin),
    })
}

/// Team-wide penalty: every agent gets -1 when the prediction is the leader.
pub fn hiding_reward(belief: &AdversaryBeliefState, leader: usize) -> Vec<f64> {
    let mu = if belief.prediction == leader { -1.0 } else { 0.0 };
    vec![mu; belief.n()]
}

/// Per-timestep leader probabilities for a whole position sequence.
pub trait LeaderPredictor {
    fn predict(&self, positions: &[Vec<Vec2>]) -> Result<Vec<Vec<f64>>>;
}

impl LeaderPredictor for AdversaryParams {
    fn predict(&self, positions: &[Vec<Vec2>]) -> Result<Vec<Vec<f64>>> {
        let n = positions.first().map_or(0, Vec::len);
        let mut belief = belief_init(self, n)?;
        positions
            .iter()
            .map(|frame| {
                belief = belief_step(self, &belief, frame)?;
                Ok(belief.probs.clone())
            })
            .collect()
    }
}

/// Fixed-size baseline: one LSTM over all `2n` coordinates and an `n`-way head.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatLstmParams {
    pub n: usize,
    pub lstm: LstmParams,
    pub head: MlpParams,
    pub centroid_shift: bool,
}

impl FlatLstmParams {
    pub fn init(rng: &mut impl Rng, n: usize, hidden: usize, centroid_shift: bool) -> Self {
        Self {
            n,
            lstm: LstmParams::init(rng, 2 * n, hidden),
            head: MlpParams::init(rng, &[hidden, n], Activation::Linear, Activation::Linear),
            centroid_shift,
        }
    }

    pub fn to_checkpoint(&self, config_snapshot: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new("flat_lstm", config_snapshot);
        ck.config["centroid_shift"] = self.centroid_shift.into();
        ck.config["n"] = self.n.into();
        ck.insert_group(
            "lstm",
            [
                ("w_input".to_string(), &self.lstm.w_input),
                ("w_hidden".to_string(), &self.lstm.w_hidden),
                ("bias".to_string(), &self.lstm.bias),
            ],
        );
        ck.insert_group("head", crate::policy::named_tensors(&self.head));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("flat_lstm")?;
        let [w_input, w_hidden, bias]: [Tensor; 3] = ck
            .group("lstm")?
            .try_into()
            .map_err(|_| Error::dim("flat_lstm checkpoint", "lstm group needs 3 tensors"))?;
        let [weight, head_bias]: [Tensor; 2] = ck
            .group("head")?
            .try_into()
            .map_err(|_| Error::dim("flat_lstm checkpoint", "head group needs 2 tensors"))?;
        let lstm = LstmParams::new(w_input, w_hidden, bias)?;
        let n = weight.cols();
        if lstm.input_width() != 2 * n {
            return Err(Error::dim("flat_lstm checkpoint", "input width is not 2n"));
        }
        Ok(Self {
            n,
            lstm,
            head: MlpParams::new(vec![crate::numcore::Linear::new(
                weight,
                head_bias,
                Activation::Linear,
            )?])?,
            centroid_shift: ck.config["centroid_shift"].as_bool().unwrap_or(true),
        })
    }
}

impl Parameters for FlatLstmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.lstm.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.lstm.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Per-step probabilities from the flat baseline.
pub fn flat_lstm_predict(params: &FlatLstmParams, positions: &[Vec<Vec2>]) -> Result<Vec<Vec<f64>>> {
    let n = positions.first().map_or(0, Vec::len);
    if n != params.n || positions.iter().any(|f| f.len() != params.n) {
        return Err(Error::arg(format!(
            "flat LSTM was built for {} agents, got {n}",
            params.n
        )));
    }
    let inputs = shifted_inputs(positions, params.centroid_shift);
    let hidden = params.lstm.hidden();
    let mut h = Tensor::zeros(&[1, hidden]);
    let mut c = Tensor::zeros(&[1, hidden]);
    inputs
        .iter()
        .map(|frame| {
            let x = Tensor::matrix(1, 2 * n, frame.iter().flatten().copied().collect());
            (h, c) = params.lstm.step_values(&x, &h, &c)?;
            let logits = params.head.forward_values(&h)?;
            Ok(softmax(&Tensor::vector(logits.into_data()))?.into_data())
        })
        .collect()
}

impl LeaderPredictor for FlatLstmParams {
    fn predict(&self, positions: &[Vec<Vec2>]) -> Result<Vec<Vec<f64>>> {
        flat_lstm_predict(self, positions)
    }
}

fn shifted_inputs(positions: &[Vec<Vec2>], shift: bool) -> Vec<Vec<Vec2>> {
    let origin = match (shift, positions.first()) {
        (true, Some(first)) => centroid(first),
        _ => [0.0, 0.0],
    };
    positions
        .iter()
        .map(|f| f.iter().map(|p| [p[0] - origin[0], p[1] - origin[1]]).collect())
        .collect()
}

/// Accuracy and confidence of a predictor at every timestep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// Fraction of episodes whose argmax prediction is the leader.
    pub accuracy: Vec<f64>,
    /// Mean probability assigned to the true leader.
    pub confidence: Vec<f64>,
    /// Mean of the largest probability.
    pub max_probability: Vec<f64>,
    pub episodes: usize,
}

impl Curves {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(0.0)
    }
}

pub fn accuracy_confidence_curves(
    predictor: &dyn LeaderPredictor,
    dataset: &TrajectoryDataset,
) -> Result<Curves> {
    let horizon = dataset.horizon();
    let mut curves = Curves {
        accuracy: vec![0.0; horizon],
        confidence: vec![0.0; horizon],
        max_probability: vec![0.0; horizon],
        episodes: dataset.len(),
    };
    if dataset.is_empty() {
        return Ok(curves);
    }
    for ep in &dataset.episodes {
        let probs = predictor.predict(&ep.positions)?;
        for (t, p) in probs.iter().enumerate() {
            if argmax(p) == ep.leader {
                curves.accuracy[t] += 1.0;
            }
            curves.confidence[t] += p[ep.leader];
            curves.max_probability[t] += p.iter().copied().fold(0.0, f64::max);
        }
    }
    let m = dataset.len() as f64;
    for v in curves
        .accuracy
        .iter_mut()
        .chain(curves.confidence.iter_mut())
        .chain(curves.max_probability.iter_mut())
    {
        *v /= m;
    }
    Ok(curves)
}

/// Outcome of supervised adversary training.
#[derive(Clone, Debug)]
pub struct Trained<P> {
    pub params: P,
    pub heldout_accuracy: f64,
    pub train_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Builds the differentiable per-step logits `[episodes, n]` of a batch of
/// equal-size episodes. Implemented by both adversary architectures.
trait SequenceModel: Parameters + Clone {
    fn bind_and_unroll(&self, tape: &mut Tape, batch: &[&EpisodeRecord]) -> Result<(Vec<Var>, Vec<Var>)>;
}

impl SequenceModel for AdversaryParams {
    fn bind_and_unroll(&self, tape: &mut Tape, batch: &[&EpisodeRecord]) -> Result<(Vec<Var>, Vec<Var>)> {
        let lstm = self.lstm.bind(tape);
        let v = tape.leaf(self.embedding.clone().reshaped(vec![self.hidden(), 1])?);
        let mut vars = lstm.vars();
        vars.push(v);
        let (b, n) = (batch.len(), batch[0].n);
        let hidden = self.hidden();
        let inputs: Vec<Vec<Vec<Vec2>>> = batch
            .iter()
            .map(|e| shifted_inputs(&e.positions, self.centroid_shift))
            .collect();
        let mut h = tape.leaf(Tensor::zeros(&[b * n, hidden]));
        let mut c = tape.leaf(Tensor::zeros(&[b * n, hidden]));
        let mut logits = Vec::with_capacity(batch[0].horizon);
        for t in 0..batch[0].horizon {
            let x: Vec<f64> = inputs.iter().flat_map(|ep| ep[t].iter().flatten().copied()).collect();
            let x = tape.leaf(Tensor::matrix(b * n, 2, x));
            (h, c) = lstm_step(tape, &lstm, x, h, c)?;
            let y = tape.matmul(h, v)?;
            logits.push(tape.reshape(y, &[b, n])?);
        }
        Ok((vars, logits))
    }
}

impl SequenceModel for FlatLstmParams {
    fn bind_and_unroll(&self, tape: &mut Tape, batch: &[&EpisodeRecord]) -> Result<(Vec<Var>, Vec<Var>)> {
        let (b, n) = (batch.len(), batch[0].n);
        if n != self.n {
            return Err(Error::arg(format!("flat LSTM built for {} agents, got {n}", self.n)));
        }
        let lstm = self.lstm.bind(tape);
        let head = self.head.bind(tape);
        let mut vars = lstm.vars();
        vars.extend(head.vars());
        let hidden = self.lstm.hidden();
        let inputs: Vec<Vec<Vec<Vec2>>> = batch
            .iter()
            .map(|e| shifted_inputs(&e.positions, self.centroid_shift))
            .collect();
        let mut h = tape.leaf(Tensor::zeros(&[b, hidden]));
        let mut c = tape.leaf(Tensor::zeros(&[b, hidden]));
        let mut logits = Vec::with_capacity(batch[0].horizon);
        for t in 0..batch[0].horizon {
            let x: Vec<f64> = inputs.iter().flat_map(|ep| ep[t].iter().flatten().copied()).collect();
            let x = tape.leaf(Tensor::matrix(b, 2 * n, x));
            (h, c) = lstm_step(tape, &lstm, x, h, c)?;
            logits.push(mlp_forward(tape, &head, h)?);
        }
        Ok((vars, logits))
    }
}

/// Mean cross-entropy over episodes and timesteps `t >= burn_in`.
fn sequence_loss<M: SequenceModel>(
    model: &M,
    batch: &[&EpisodeRecord],
    burn_in: usize,
) -> Result<(Tape, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let (vars, logits) = model.bind_and_unroll(&mut tape, batch)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.leader).collect();
    let steps: Vec<Var> = logits
        .iter()
        .skip(burn_in.min(logits.len().saturating_sub(1)))
        .map(|&l| tape.cross_entropy_logits(l, &labels))
        .collect::<Result<_>>()?;
    let stacked = tape.vstack(&steps)?;
    let loss = tape.mean(stacked)?;
    Ok((tape, loss, vars))
}

fn train_sequence_model<M, P>(
    mut model: M,
    dataset: &TrajectoryDataset,
    config: &AdversaryConfig,
    predictor: P,
) -> Result<Trained<M>>
where
    M: SequenceModel,
    P: Fn(&M) -> &dyn LeaderPredictor,
{
    dataset.validate()?;
    if dataset.len() < 2 {
        return Err(Error::arg("need at least two episodes to train"));
    }
    let mut warnings = Vec::new();
    if dataset.has_degenerate_labels() {
        let msg = "every episode has the same leader index (degenerate labels)".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let (train, heldout) = dataset.split(config.train_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = SgdMomentum::new(config.learning_rate, config.momentum);
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        // cosine decay settles the late-epoch loss spikes
        let progress = epoch as f64 / config.epochs as f64;
        opt.lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_episodes.max(1)) {
            // group by team size; each group is one differentiable batch
            let mut sizes: Vec<usize> = chunk.iter().map(|&i| train.episodes[i].n).collect();
            sizes.sort_unstable();
            sizes.dedup();
            for n in sizes {
                let group: Vec<EpisodeRecord> = chunk
                    .iter()
                    .map(|&i| &train.episodes[i])
                    .filter(|e| e.n == n)
                    .map(|e| if config.augment { rotate_mirror(e, &mut rng) } else { e.clone() })
                    .collect();
                let group: Vec<&EpisodeRecord> = group.iter().collect();
                let (tape, loss, vars) = sequence_loss(&model, &group, config.burn_in)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Evaluation(format!("non-finite adversary loss at epoch {epoch}")));
                }
                let grads = tape.backward(loss)?;
                let mut g = collect_grads(&grads, &vars);
                clip_grad_norm(&mut g, config.max_grad_norm);
                opt.step(model.tensors_mut(), &g);
                epoch_loss += value;
                batches += 1;
            }
        }
        loss_history.push(epoch_loss / batches.max(1) as f64);
    }
    let heldout_accuracy = if heldout.is_empty() {
        0.0
    } else {
        accuracy_confidence_curves(predictor(&model), &heldout)?.final_accuracy()
    };
    let train_accuracy = accuracy_confidence_curves(predictor(&model), &train)?.final_accuracy();
    Ok(Trained {
        params: model,
        heldout_accuracy,
        train_accuracy,
        loss_history,
        warnings,
    })
}

/// Random rotation, optionally mirrored, about the first-frame centroid.
/// Goals are placed uniformly in angle, so this preserves the data distribution.
fn rotate_mirror(e: &EpisodeRecord, rng: &mut ChaCha8Rng) -> EpisodeRecord {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let flip = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
    let (sin, cos) = angle.sin_cos();
    let first = &e.positions[0];
    let cx = first.iter().map(|p| p[0]).sum::<f64>() / first.len() as f64;
    let cy = first.iter().map(|p| p[1]).sum::<f64>() / first.len() as f64;
    let positions = e
        .positions
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|p| {
                    let (x, y) = (p[0] - cx, flip * (p[1] - cy));
                    [cx + cos * x - sin * y, cy + sin * x + cos * y]
                })
                .collect()
        })
        .collect();
    EpisodeRecord {
        positions,
        ..e.clone()
    }
}

/// Supervised training of the scalable adversary with SGD + momentum.
pub fn train_adversary(dataset: &TrajectoryDataset, config: &AdversaryConfig) -> Result<Trained<AdversaryParams>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = AdversaryParams::init(&mut rng, config.hidden, config.centroid_shift);
    train_sequence_model(model, dataset, config, |m| m as &dyn LeaderPredictor)
}

/// Supervised training of the fixed-size baseline; all episodes must share `n`.
pub fn train_flat_lstm(dataset: &TrajectoryDataset, config: &AdversaryConfig) -> Result<Trained<FlatLstmParams>> {
    let n = dataset
        .episodes
        .first()
        .map(|e| e.n)
        .ok_or_else(|| Error::arg("empty dataset"))?;
    if dataset.episodes.iter().any(|e| e.n != n) {
        return Err(Error::arg("flat LSTM needs a single team size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = FlatLstmParams::init(&mut rng, n, config.flat_hidden, config.centroid_shift);
    train_sequence_model(model, dataset, config, |m| m as &dyn LeaderPredictor)
}

/// Differentiable scalar loss of the scalable adversary on a batch, exposed
/// for gradient checking.
pub fn adversary_loss_on_tape(
    tape: &mut Tape,
    lstm: &crate::numcore::BoundLstm,
    embedding: Var,
    episodes: &[&EpisodeRecord],
    burn_in: usize,
    centroid_shift: bool,
) -> Result<Var> {
    let (b, n) = (episodes.len(), episodes[0].n);
    let hidden = tape.value(lstm.w_hidden).rows();
    let v = tape.reshape(embedding, &[hidden, 1])?;
    let inputs: Vec<Vec<Vec<Vec2>>> = episodes
        .iter()
        .map(|e| shifted_inputs(&e.positions, centroid_shift))
        .collect();
    let labels: Vec<usize> = episodes.iter().map(|e| e.leader).collect();
    let mut h = tape.leaf(Tensor::zeros(&[b * n, hidden]));
    let mut c = tape.leaf(Tensor::zeros(&[b * n, hidden]));
    let mut losses = Vec::new();
    for t in 0..episodes[0].horizon {
        let x: Vec<f64> = inputs.iter().flat_map(|ep| ep[t].iter().flatten().copied()).collect();
        let x = tape.leaf(Tensor::matrix(b * n, 2, x));
        (h, c) = lstm_step(tape, lstm, x, h, c)?;
        if t >= burn_in {
            let y = tape.matmul(h, v)?;
            let y = tape.reshape(y, &[b, n])?;
            losses.push(tape.cross_entropy_logits(y, &labels)?);
        }
    }
    let stacked = tape.vstack(&losses)?;
    tape.mean(stacked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk(seed: u64, n: usize, horizon: usize) -> EpisodeRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos: Vec<Vec2> = (0..n).map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).collect();
        let positions = (0..horizon)
            .map(|_| {
                for p in pos.iter_mut() {
                    p[0] += rng.random_range(-0.05..0.05);
                    p[1] += rng.random_range(-0.05..0.05);
                }
                pos.clone()
            })
            .collect();
        EpisodeRecord {
            n,
            horizon,
            leader: rng.random_range(0..n),
            positions,
        }
    }

    #[test]
    fn init_belief_is_uniform() {
        let p = AdversaryParams::init(&mut ChaCha8Rng::seed_from_u64(0), 14, true);
        let b = belief_init(&p, 6).unwrap();
        assert!(b.probs.iter().all(|&q| q == 1.0 / 6.0));
        assert_eq!(b.prediction, 0);
        let small = belief_init(&p, 3).unwrap();
        let big = belief_init(&p, 10).unwrap();
        assert_eq!(small.hidden.shape(), &[3, 14]);
        assert_eq!(big.hidden.shape(), &[10, 14]);
        assert!(belief_init(&p, 1).is_err());
    }

    #[test]
    fn agent_count_change_is_rejected() {
        let p = AdversaryParams::init(&mut ChaCha8Rng::seed_from_u64(0), 4, true);
        let b = belief_init(&p, 3).unwrap();
        assert!(belief_step(&p, &b, &[[0.0, 0.0]; 4]).is_err());
    }

    #[test]
    fn parameter_count_is_near_reported() {
        let p = AdversaryParams::init(&mut ChaCha8Rng::seed_from_u64(0), 14, true);
        assert_eq!(p.param_count(), 966);
    }

    #[test]
    fn hiding_reward_is_team_wide() {
        let p = AdversaryParams::init(&mut ChaCha8Rng::seed_from_u64(0), 4, true);
        let mut b = belief_init(&p, 4).unwrap();
        b.prediction = 2;
        assert_eq!(hiding_reward(&b, 2), vec![-1.0; 4]);
        assert_eq!(hiding_reward(&b, 1), vec![0.0; 4]);
    }

    #[test]
    fn jsonl_round_trip_and_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = TrajectoryDataset::new((0..3).map(|s| walk(s, 4, 5)).collect()).unwrap();
        ds.write_jsonl(&path).unwrap();
        assert_eq!(TrajectoryDataset::read_jsonl(&path).unwrap(), ds);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["n", "horizon", "leader", "positions"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        std::fs::write(&path, "{\"n\":2}\n").unwrap();
        assert!(matches!(TrajectoryDataset::read_jsonl(&path), Err(Error::Integrity { .. })));
    }

    #[test]
    fn mixed_horizons_are_rejected() {
        assert!(TrajectoryDataset::new(vec![walk(0, 3, 5), walk(1, 3, 6)]).is_err());
    }

    #[test]
    fn split_is_by_episode() {
        let ds = TrajectoryDataset::new((0..10).map(|s| walk(s, 3, 4)).collect()).unwrap();
        let (a, b) = ds.split(0.8, 1);
        assert_eq!((a.len(), b.len()), (8, 2));
        for e in &b.episodes {
            assert!(!a.episodes.contains(e));
        }
    }

    #[test]
    fn degenerate_labels_warn() {
        let mut eps: Vec<_> = (0..6).map(|s| walk(s, 3, 4)).collect();
        for e in eps.iter_mut() {
            e.leader = 1;
        }
        let ds = TrajectoryDataset::new(eps).unwrap();
        let cfg = AdversaryConfig {
            epochs: 1,
            ..Default::default()
        };
        let trained = train_adversary(&ds, &cfg).unwrap();
        assert_eq!(trained.warnings.len(), 1);
    }

    #[test]
    fn flat_checkpoint_round_trip() {
        let p = FlatLstmParams::init(&mut ChaCha8Rng::seed_from_u64(2), 6, 19, true);
        let back = FlatLstmParams::from_checkpoint(&p.to_checkpoint(serde_json::json!({}))).unwrap();
        assert_eq!(back, p);
        let a = AdversaryParams::init(&mut ChaCha8Rng::seed_from_u64(2), 14, false);
        let back = AdversaryParams::from_checkpoint(&a.to_checkpoint(serde_json::json!({}))).unwrap();
        assert_eq!(back, a);
    }
}
