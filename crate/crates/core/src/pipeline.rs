//! Three-stage training: naive policy, adversary, identity-hiding policy.
//!
//! All artifacts live under one run directory next to `manifest.json`,
//! referenced by relative path. A stage counts as done when the manifest
//! records it and its artifacts load; [`run_all`] skips such stages.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{train_adversary, AdversaryParams, TrajectoryDataset};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{rollout_episodes, PolicySource};
use crate::numcore::checkpoint::write_atomic;
use crate::numcore::Checkpoint;
use crate::policy::{ActMode, PolicyParams};
use crate::ppo::{train_with_progress, write_training_log, IterationLog, Objective, PpoConfig, TrainSetup};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStage {
    pub seed: u64,
    pub checkpoint: String,
    pub training_log: String,
    /// Stage 3 only: whether training started from the stage-1 weights.
    pub warm_start: bool,
    pub final_mean_primary_reward: f64,
    pub final_mean_hiding_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStage {
    pub seed: u64,
    pub dataset: String,
    pub episodes: usize,
    pub greedy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryStage {
    pub seed: u64,
    pub checkpoint: String,
    pub heldout_accuracy: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stage1: Option<PolicyStage>,
    pub stage2_dataset: Option<DatasetStage>,
    pub stage2_adversary: Option<AdversaryStage>,
    pub stage3: Option<PolicyStage>,
    pub warnings: Vec<String>,
}

impl PipelineManifest {
    pub fn new(config: &RunConfig, seed: u64) -> Self {
        Self {
            version: MANIFEST_VERSION,
            seed,
            config: config.snapshot(),
            stage1: None,
            stage2_dataset: None,
            stage2_adversary: None,
            stage3: None,
            warnings: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.stage1.is_some() && self.stage2_dataset.is_some() && self.stage2_adversary.is_some() && self.stage3.is_some()
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => {
                let m: Self = serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&path, e.to_string()))?;
                if m.version != MANIFEST_VERSION {
                    return Err(Error::integrity(&path, format!("manifest version {}", m.version)));
                }
                Ok(Some(m))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }
}

/// Which stage of the procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Naive,
    Collect,
    Adversary,
    Hiding,
}

/// A run directory bound to one configuration and seed.
pub struct Pipeline {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: PipelineManifest,
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = 0;
    for _ in 0..=stage {
        out = rng.next_u64();
    }
    out
}

impl Pipeline {
    /// Opens `dir`, creating a manifest if none exists. An existing manifest
    /// must carry the same config snapshot and seed.
    pub fn open(dir: &Path, config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = match PipelineManifest::load(dir)? {
            Some(m) => {
                if m.config != config.snapshot() || m.seed != seed {
                    return Err(Error::integrity(
                        dir.join(MANIFEST_FILE),
                        "run directory was created with a different config or seed",
                    ));
                }
                m
            }
            None => {
                let m = PipelineManifest::new(config, seed);
                m.save(dir)?;
                m
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config: config.clone(),
            manifest,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn env_snapshot(&self) -> serde_json::Value {
        serde_json::json!({ "env": self.config.env, "run": self.manifest.config })
    }

    fn load_checkpoint(&self, rel: &str, kind: &str) -> Result<Checkpoint> {
        let path = self.path(rel);
        let ck = Checkpoint::load(&path)?;
        ck.expect_kind(kind)?;
        if ck.config["env"] != serde_json::to_value(&self.config.env)? {
            return Err(Error::integrity(&path, "checkpoint was trained under a different environment"));
        }
        Ok(ck)
    }

    pub fn stage1_policy(&self) -> Result<PolicyParams> {
        let s = self.manifest.stage1.as_ref().ok_or_else(|| order_error(Stage::Naive))?;
        PolicyParams::from_checkpoint(&self.load_checkpoint(&s.checkpoint, "policy")?)
    }

    pub fn stage2_dataset(&self) -> Result<TrajectoryDataset> {
        let s = self.manifest.stage2_dataset.as_ref().ok_or_else(|| order_error(Stage::Collect))?;
        TrajectoryDataset::read_jsonl(&self.path(&s.dataset))
    }

    pub fn stage2_adversary(&self) -> Result<AdversaryParams> {
        let s = self.manifest.stage2_adversary.as_ref().ok_or_else(|| order_error(Stage::Adversary))?;
        AdversaryParams::from_checkpoint(&self.load_checkpoint(&s.checkpoint, "adversary")?)
    }

    pub fn stage3_policy(&self) -> Result<PolicyParams> {
        let s = self.manifest.stage3.as_ref().ok_or_else(|| order_error(Stage::Hiding))?;
        PolicyParams::from_checkpoint(&self.load_checkpoint(&s.checkpoint, "policy")?)
    }

    /// True when the stage is recorded and its artifacts are present.
    /// A present but unreadable artifact is an integrity error.
    pub fn stage_done(&self, stage: Stage) -> Result<bool> {
        let file = match stage {
            Stage::Naive => self.manifest.stage1.as_ref().map(|s| s.checkpoint.clone()),
            Stage::Collect => self.manifest.stage2_dataset.as_ref().map(|s| s.dataset.clone()),
            Stage::Adversary => self.manifest.stage2_adversary.as_ref().map(|s| s.checkpoint.clone()),
            Stage::Hiding => self.manifest.stage3.as_ref().map(|s| s.checkpoint.clone()),
        };
        let Some(rel) = file else { return Ok(false) };
        if !self.path(&rel).exists() {
            return Ok(false);
        }
        match stage {
            Stage::Naive => self.stage1_policy().map(drop),
            Stage::Collect => self.stage2_dataset().map(drop),
            Stage::Adversary => self.stage2_adversary().map(drop),
            Stage::Hiding => self.stage3_policy().map(drop),
        }?;
        Ok(true)
    }

    fn invalidate_after(&mut self, stage: Stage) {
        let m = &mut self.manifest;
        match stage {
            Stage::Naive => {
                m.stage2_dataset = None;
                m.stage2_adversary = None;
                m.stage3 = None;
            }
            Stage::Collect => {
                m.stage2_adversary = None;
                m.stage3 = None;
            }
            Stage::Adversary => m.stage3 = None,
            Stage::Hiding => {}
        }
    }

    fn train_policy(
        &mut self,
        objective: Objective,
        adversary: Option<AdversaryParams>,
        warm_start: Option<PolicyParams>,
        ppo: PpoConfig,
        seed: u64,
        sub: &str,
        progress: &mut dyn FnMut(&IterationLog),
    ) -> Result<PolicyStage> {
        let setup = TrainSetup {
            policy: self.config.policy.clone(),
            warm_start: warm_start.clone(),
            adversary,
            ..TrainSetup::new(objective, self.config.env.clone(), ppo)
        };
        let outcome = train_with_progress(&setup, seed, |r| progress(r))?;
        std::fs::create_dir_all(self.path(sub)).map_err(|e| Error::io(self.path(sub), e))?;
        let checkpoint = format!("{sub}/policy.json");
        let training_log = format!("{sub}/training_log.csv");
        write_training_log(&self.path(&training_log), &outcome.log)?;
        outcome.params.to_checkpoint(self.env_snapshot()).save(&self.path(&checkpoint))?;
        let last = outcome.log.last();
        Ok(PolicyStage {
            seed,
            checkpoint,
            training_log,
            warm_start: warm_start.is_some(),
            final_mean_primary_reward: last.map_or(0.0, |r| r.mean_primary_reward),
            final_mean_hiding_reward: last.map_or(0.0, |r| r.mean_hiding_reward),
        })
    }

    /// Stage 1: PPO on the goal-reaching reward only.
    pub fn stage1_naive(&mut self, progress: &mut dyn FnMut(&IterationLog)) -> Result<&PolicyStage> {
        let seed = stage_seed(self.manifest.seed, 0);
        let ppo = self.config.ppo.clone();
        let record = self.train_policy(Objective::Naive, None, None, ppo, seed, "stage1", progress)?;
        self.invalidate_after(Stage::Naive);
        self.manifest.stage1 = Some(record);
        self.manifest.save(&self.dir)?;
        Ok(self.manifest.stage1.as_ref().expect("just set"))
    }

    /// Stage 2a: roll out the stage-1 policy and write the dataset.
    pub fn stage2_collect(&mut self) -> Result<&DatasetStage> {
        let policy = self.stage1_policy()?;
        let seed = stage_seed(self.manifest.seed, 1);
        let p = self.config.pipeline.clone();
        let mode = if p.greedy_collection { ActMode::Greedy } else { ActMode::Sample };
        let eps = rollout_episodes(
            &PolicySource::Learned(policy),
            &self.config.env,
            None,
            self.config.env.n_agents,
            p.dataset_episodes,
            seed,
            mode,
        )?;
        let ds = TrajectoryDataset::new(eps.iter().map(|e| e.record()).collect())?;
        std::fs::create_dir_all(self.path("stage2")).map_err(|e| Error::io(self.path("stage2"), e))?;
        let rel = "stage2/dataset.jsonl".to_string();
        ds.write_jsonl(&self.path(&rel))?;
        self.invalidate_after(Stage::Collect);
        self.manifest.stage2_dataset = Some(DatasetStage {
            seed,
            dataset: rel,
            episodes: ds.len(),
            greedy: p.greedy_collection,
        });
        self.manifest.save(&self.dir)?;
        Ok(self.manifest.stage2_dataset.as_ref().expect("just set"))
    }

    /// Stage 2b: supervised adversary training on the collected dataset.
    pub fn stage2_adversary_train(&mut self) -> Result<&AdversaryStage> {
        let ds = self.stage2_dataset()?;
        let seed = stage_seed(self.manifest.seed, 2);
        let cfg = crate::adversary::AdversaryConfig {
            seed,
            ..self.config.adversary.clone()
        };
        let trained = train_adversary(&ds, &cfg)?;
        self.manifest.warnings.retain(|w| !w.starts_with("stage2"));
        for w in &trained.warnings {
            self.manifest.warnings.push(format!("stage2: {w}"));
        }
        if trained.heldout_accuracy < 0.5 {
            let msg = format!("stage2: weak adversary (held-out accuracy {:.3})", trained.heldout_accuracy);
            log::warn!("{msg}");
            self.manifest.warnings.push(msg);
        }
        let rel = "stage2/adversary.json".to_string();
        let mut snapshot = self.env_snapshot();
        snapshot["adversary"] = serde_json::to_value(&cfg)?;
        trained.params.to_checkpoint(snapshot).save(&self.path(&rel))?;
        self.invalidate_after(Stage::Adversary);
        self.manifest.stage2_adversary = Some(AdversaryStage {
            seed,
            checkpoint: rel,
            heldout_accuracy: trained.heldout_accuracy,
            train_accuracy: trained.train_accuracy,
        });
        self.manifest.save(&self.dir)?;
        Ok(self.manifest.stage2_adversary.as_ref().expect("just set"))
    }

    /// Stage 3: PPO with the hiding reward against the frozen adversary.
    pub fn stage3_hiding(&mut self, progress: &mut dyn FnMut(&IterationLog)) -> Result<&PolicyStage> {
        let adversary = self.stage2_adversary()?;
        let warm = if self.config.pipeline.warm_start {
            Some(self.stage1_policy()?)
        } else {
            None
        };
        let seed = stage_seed(self.manifest.seed, 3);
        let ppo = PpoConfig {
            total_iterations: self.config.pipeline.stage3_iterations,
            entropy_coef: self.config.pipeline.stage3_entropy_coef,
            ..self.config.ppo.clone()
        };
        let record = self.train_policy(Objective::Hiding, Some(adversary), warm, ppo, seed, "stage3", progress)?;
        self.manifest.stage3 = Some(record);
        self.manifest.save(&self.dir)?;
        Ok(self.manifest.stage3.as_ref().expect("just set"))
    }

    /// Runs `stage` after checking that its predecessors are done.
    pub fn run_stage(&mut self, stage: Stage, progress: &mut dyn FnMut(&IterationLog)) -> Result<()> {
        let needs = match stage {
            Stage::Naive => None,
            Stage::Collect => Some(Stage::Naive),
            Stage::Adversary => Some(Stage::Collect),
            Stage::Hiding => Some(Stage::Adversary),
        };
        if let Some(prev) = needs {
            if !self.stage_done(prev)? {
                return Err(order_error(prev));
            }
        }
        match stage {
            Stage::Naive => self.stage1_naive(progress).map(drop),
            Stage::Collect => self.stage2_collect().map(drop),
            Stage::Adversary => self.stage2_adversary_train().map(drop),
            Stage::Hiding => self.stage3_hiding(progress).map(drop),
        }
    }
}

fn order_error(missing: Stage) -> Error {
    Error::Argument(format!("stage {missing:?} has not completed; run the stages in order"))
}

/// Runs every stage that is not already complete, in order.
pub fn run_all(dir: &Path, config: &RunConfig, seed: u64) -> Result<PipelineManifest> {
    run_all_with_progress(dir, config, seed, &mut |_| {})
}

pub fn run_all_with_progress(
    dir: &Path,
    config: &RunConfig,
    seed: u64,
    progress: &mut dyn FnMut(&IterationLog),
) -> Result<PipelineManifest> {
    let mut p = Pipeline::open(dir, config, seed)?;
    for stage in [Stage::Naive, Stage::Collect, Stage::Adversary, Stage::Hiding] {
        if p.stage_done(stage)? {
            log::info!("{stage:?} already complete");
            continue;
        }
        log::info!("running {stage:?}");
        p.run_stage(stage, progress)?;
    }
    Ok(p.manifest)
}
