//! Evaluation: normalized rewards, adversary metrics, team-size sweeps,
//! trace export and plot emission.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{accuracy_confidence_curves, belief_init, belief_step, AdversaryParams, EpisodeRecord, TrajectoryDataset};
use crate::baselines::{scripted_pd_act, PdGains};
use crate::env::{distance, Action, Env, EnvConfig, Vec2, WorldState, REWARD_SCALE};
use crate::error::{Error, Result};
use crate::numcore::checkpoint::write_atomic;
use crate::numcore::Parameters;
use crate::policy::{choose, evaluate_states, ActMode, PolicyParams};

pub const TRACE_VERSION: &str = "trace-v1";

/// Who drives the team during evaluation.
#[derive(Clone, Debug)]
pub enum PolicySource {
    Learned(PolicyParams),
    Scripted(PdGains),
    /// Uniformly random actions for every agent.
    RandomWalk,
    /// Every agent always no-ops.
    Idle,
}

impl PolicySource {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Learned(_) => "learned",
            Self::Scripted(_) => "scripted-pd",
            Self::RandomWalk => "random-walk",
            Self::Idle => "idle",
        }
    }
}

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEpisode {
    pub initial: WorldState,
    pub final_state: WorldState,
    /// Positions after each step, `[t][agent]`.
    pub positions: Vec<Vec<Vec2>>,
    pub actions: Vec<Vec<Action>>,
    /// Sum over agents and steps of the primary reward.
    pub team_reward: f64,
    pub adversary_probs: Option<Vec<Vec<f64>>>,
    pub predictions: Option<Vec<usize>>,
}

impl EvalEpisode {
    /// Team reward over its telescoping optimum, clamped to [0, 1].
    pub fn normalized_primary(&self) -> f64 {
        let optimum: f64 = self
            .initial
            .agents
            .iter()
            .map(|a| REWARD_SCALE * distance(a.position, self.initial.goal))
            .sum();
        if optimum <= 0.0 {
            return 1.0;
        }
        (self.team_reward / optimum).clamp(0.0, 1.0)
    }

    /// One minus the fraction of steps whose prediction is the leader.
    pub fn normalized_hiding(&self) -> Option<f64> {
        let preds = self.predictions.as_ref()?;
        let hits = preds.iter().filter(|&&p| p == self.initial.leader).count();
        Some(1.0 - hits as f64 / preds.len().max(1) as f64)
    }

    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            n: self.initial.n(),
            horizon: self.positions.len(),
            leader: self.initial.leader,
            positions: self.positions.clone(),
        }
    }
}

struct Lane {
    state: WorldState,
    rng: ChaCha8Rng,
    episode: EvalEpisode,
    belief: Option<crate::adversary::AdversaryBeliefState>,
}

/// Runs `episodes` episodes with `n` agents in lockstep. Learned policies act
/// in `mode`; episode seeds come from one stream keyed by `seed`.
pub fn rollout_episodes(
    source: &PolicySource,
    env_config: &EnvConfig,
    adversary: Option<&AdversaryParams>,
    n: usize,
    episodes: usize,
    seed: u64,
    mode: ActMode,
) -> Result<Vec<EvalEpisode>> {
    let env = Env::new(env_config.clone())?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut lanes = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let env_seed = seeds.next_u64();
        let act_seed = seeds.next_u64();
        let state = env.reset(env_seed, n)?;
        lanes.push(Lane {
            rng: ChaCha8Rng::seed_from_u64(act_seed),
            belief: adversary.map(|a| belief_init(a, n)).transpose()?,
            episode: EvalEpisode {
                initial: state.clone(),
                final_state: state.clone(),
                positions: Vec::with_capacity(env_config.horizon),
                actions: Vec::with_capacity(env_config.horizon),
                team_reward: 0.0,
                adversary_probs: adversary.map(|_| Vec::new()),
                predictions: adversary.map(|_| Vec::new()),
            },
            state,
        });
    }
    for _ in 0..env_config.horizon {
        let actions: Vec<Vec<Action>> = match source {
            PolicySource::Learned(params) => {
                let states: Vec<WorldState> = lanes.iter().map(|l| l.state.clone()).collect();
                let dists = evaluate_states(params, &states)?;
                lanes
                    .iter_mut()
                    .zip(&dists)
                    .map(|(l, d)| choose(d, &mut l.rng, mode).actions)
                    .collect()
            }
            PolicySource::Scripted(gains) => lanes.iter().map(|l| scripted_pd_act(&l.state, gains)).collect(),
            PolicySource::RandomWalk => lanes
                .iter_mut()
                .map(|l| (0..n).map(|_| Action::ALL[l.rng.random_range(0..Action::COUNT)]).collect())
                .collect(),
            PolicySource::Idle => vec![vec![Action::Noop; n]; lanes.len()],
        };
        for (lane, acts) in lanes.iter_mut().zip(actions) {
            let (next, rewards) = env.step(&lane.state, &acts)?;
            let positions = next.positions();
            if let (Some(adv), Some(belief)) = (adversary, lane.belief.as_mut()) {
                *belief = belief_step(adv, belief, &positions)?;
                let ep = &mut lane.episode;
                ep.adversary_probs.as_mut().expect("adversary").push(belief.probs.clone());
                ep.predictions.as_mut().expect("adversary").push(belief.prediction);
            }
            let ep = &mut lane.episode;
            ep.team_reward += rewards.0.iter().sum::<f64>();
            ep.positions.push(positions);
            ep.actions.push(acts);
            lane.state = next;
        }
    }
    Ok(lanes
        .into_iter()
        .map(|l| EvalEpisode {
            final_state: l.state,
            ..l.episode
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub algorithm: String,
    pub n: usize,
    pub episodes: usize,
    pub normalized_primary_reward: f64,
    /// Present when an adversary watched the episodes.
    pub normalized_hiding_reward: Option<f64>,
    /// Final-step identification accuracy.
    pub adversary_accuracy: Option<f64>,
    /// Identification accuracy averaged over all steps; equals
    /// `1 - normalized_hiding_reward`.
    pub mean_step_accuracy: Option<f64>,
    pub accuracy_curve: Vec<f64>,
    pub confidence_curve: Vec<f64>,
    /// Fraction of episodes ending with the leader within the goal radius.
    pub goal_reached_fraction: f64,
    pub mean_final_leader_distance: f64,
    pub parameter_count: usize,
    pub config: serde_json::Value,
}

/// Greedy evaluation of `source` with `n` agents.
pub fn evaluate(
    source: &PolicySource,
    adversary: Option<&AdversaryParams>,
    env_config: &EnvConfig,
    n: usize,
    episodes: usize,
    goal_radius: f64,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::arg("need at least one evaluation episode"));
    }
    let eps = rollout_episodes(source, env_config, adversary, n, episodes, seed, ActMode::Greedy)?;
    Ok(report_from_episodes(source, adversary, env_config, &eps, goal_radius))
}

pub fn report_from_episodes(
    source: &PolicySource,
    adversary: Option<&AdversaryParams>,
    env_config: &EnvConfig,
    eps: &[EvalEpisode],
    goal_radius: f64,
) -> EvalReport {
    let m = eps.len() as f64;
    let mean = |f: &dyn Fn(&EvalEpisode) -> f64| eps.iter().map(f).sum::<f64>() / m;
    let n = eps.first().map_or(0, |e| e.initial.n());
    let (curves, hiding) = match adversary {
        Some(adv) => {
            let ds = TrajectoryDataset {
                episodes: eps.iter().map(EvalEpisode::record).collect(),
            };
            let curves = accuracy_confidence_curves(adv, &ds).expect("shapes match rollouts");
            let hiding = mean(&|e| e.normalized_hiding().expect("adversary present"));
            (Some(curves), Some(hiding))
        }
        None => (None, None),
    };
    EvalReport {
        algorithm: source.label().to_string(),
        n,
        episodes: eps.len(),
        normalized_primary_reward: mean(&|e| e.normalized_primary()),
        normalized_hiding_reward: hiding,
        adversary_accuracy: curves.as_ref().map(|c| c.final_accuracy()),
        mean_step_accuracy: hiding.map(|h| 1.0 - h),
        accuracy_curve: curves.as_ref().map(|c| c.accuracy.clone()).unwrap_or_default(),
        confidence_curve: curves.map(|c| c.confidence).unwrap_or_default(),
        goal_reached_fraction: mean(&|e| f64::from(u8::from(e.final_state.leader_distance() < goal_radius))),
        mean_final_leader_distance: mean(&|e| e.final_state.leader_distance()),
        parameter_count: match source {
            PolicySource::Learned(p) => p.param_count(),
            _ => 0,
        },
        config: serde_json::json!({ "env": env_config }),
    }
}

/// Refuses to compare artifacts trained under different environments.
pub fn ensure_same_env(a: &serde_json::Value, b: &serde_json::Value, path: &Path) -> Result<()> {
    let (ea, eb) = (&a["env"], &b["env"]);
    if ea.is_null() || eb.is_null() || ea != eb {
        return Err(Error::integrity(
            path,
            format!("environment config mismatch: {ea} vs {eb}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub n: usize,
    pub accuracy: f64,
    pub report: EvalReport,
}

/// Adversary final-step accuracy at every team size in `sizes`.
pub fn team_size_sweep(
    source: &PolicySource,
    adversary: &AdversaryParams,
    env_config: &EnvConfig,
    sizes: &[usize],
    episodes: usize,
    goal_radius: f64,
    seed: u64,
) -> Result<Vec<SizePoint>> {
    if let Some(&bad) = sizes.iter().find(|&&n| n < 2) {
        return Err(Error::arg(format!("team size {bad} is below 2")));
    }
    sizes
        .iter()
        .map(|&n| {
            let report = evaluate(source, Some(adversary), env_config, n, episodes, goal_radius, seed)?;
            Ok(SizePoint {
                n,
                accuracy: report.adversary_accuracy.unwrap_or(0.0),
                report,
            })
        })
        .collect()
}

/// Runs a policy at a team size it was not trained on.
pub fn policy_size_transfer(
    params: &PolicyParams,
    adversary: Option<&AdversaryParams>,
    env_config: &EnvConfig,
    n_test: usize,
    episodes: usize,
    goal_radius: f64,
    seed: u64,
) -> Result<EvalReport> {
    evaluate(
        &PolicySource::Learned(params.clone()),
        adversary,
        env_config,
        n_test,
        episodes,
        goal_radius,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub positions: Vec<Vec2>,
    pub actions: Vec<usize>,
    pub adversary_probs: Option<Vec<f64>>,
}

/// Replayable episode for the browser client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub version: String,
    pub n: usize,
    pub horizon: usize,
    pub leader: usize,
    pub goal: Vec2,
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn from_episode(ep: &EvalEpisode) -> Self {
        let steps = ep
            .positions
            .iter()
            .enumerate()
            .map(|(t, pos)| TraceStep {
                t,
                positions: pos.clone(),
                actions: ep.actions[t].iter().map(|a| a.index()).collect(),
                adversary_probs: ep.adversary_probs.as_ref().map(|p| p[t].clone()),
            })
            .collect();
        Self {
            version: TRACE_VERSION.to_string(),
            n: ep.initial.n(),
            horizon: ep.positions.len(),
            leader: ep.initial.leader,
            goal: ep.initial.goal,
            steps,
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let t: Self = serde_json::from_slice(bytes)?;
        if t.version != TRACE_VERSION {
            return Err(Error::arg(format!("unsupported trace version `{}`", t.version)));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceIndexEntry {
    pub id: String,
    pub algorithm: String,
    pub n: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceIndex {
    pub traces: Vec<TraceIndexEntry>,
}

impl TraceIndex {
    pub const FILE: &'static str = "index.json";

    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&path, e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

/// Writes `{id}.json` per episode and merges entries into `index.json`.
pub fn export_traces(
    episodes: &[EvalEpisode],
    algorithm: &str,
    dir: &Path,
) -> Result<Vec<TraceIndexEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = TraceIndex::load_or_default(dir)?;
    let mut written = Vec::with_capacity(episodes.len());
    for (k, ep) in episodes.iter().enumerate() {
        let trace = EpisodeTrace::from_episode(ep);
        let id = format!("{algorithm}-n{}-{k:03}", trace.n);
        write_atomic(&dir.join(format!("{id}.json")), &serde_json::to_vec(&trace)?)?;
        let entry = TraceIndexEntry {
            id,
            algorithm: algorithm.to_string(),
            n: trace.n,
            horizon: trace.horizon,
        };
        index.traces.retain(|e| e.id != entry.id);
        index.traces.push(entry.clone());
        written.push(entry);
    }
    write_atomic(&dir.join(TraceIndex::FILE), &serde_json::to_vec_pretty(&index)?)?;
    Ok(written)
}

/// Files produced by [`emit_plots`].
pub const PLOT_STEMS: [&str; 4] = ["accuracy_vs_time", "confidence_vs_time", "accuracy_vs_n", "reward_bars"];

/// Writes CSV + SVG for time curves, the size sweep and reward bars.
pub fn emit_plots(reports: &[EvalReport], sweep: &[SizePoint], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let with_curves: Vec<&EvalReport> = reports.iter().filter(|r| !r.accuracy_curve.is_empty()).collect();
    for (stem, pick, label) in [
        ("accuracy_vs_time", (|r: &EvalReport| &r.accuracy_curve) as fn(&EvalReport) -> &Vec<f64>, "accuracy"),
        ("confidence_vs_time", |r: &EvalReport| &r.confidence_curve, "confidence"),
    ] {
        let series: Vec<(String, Vec<f64>)> = with_curves
            .iter()
            .map(|r| (r.algorithm.clone(), pick(r).clone()))
            .collect();
        let horizon = series.iter().map(|s| s.1.len()).max().unwrap_or(0);
        let mut csv = String::from("t");
        for (name, _) in &series {
            write!(csv, ",{name}").expect("string write");
        }
        csv.push('\n');
        for t in 0..horizon {
            write!(csv, "{t}").expect("string write");
            for (_, ys) in &series {
                write!(csv, ",{:.6}", ys.get(t).copied().unwrap_or(f64::NAN)).expect("string write");
            }
            csv.push('\n');
        }
        write_atomic(&dir.join(format!("{stem}.csv")), csv.as_bytes())?;
        let svg = line_chart(&format!("{label} vs time"), "t", &series, 0..horizon);
        write_atomic(&dir.join(format!("{stem}.svg")), svg.as_bytes())?;
    }

    let mut csv = String::from("n,accuracy\n");
    for p in sweep {
        writeln!(csv, "{},{:.6}", p.n, p.accuracy).expect("string write");
    }
    write_atomic(&dir.join("accuracy_vs_n.csv"), csv.as_bytes())?;
    let xs: Vec<usize> = sweep.iter().map(|p| p.n).collect();
    let series = vec![("accuracy".to_string(), sweep.iter().map(|p| p.accuracy).collect())];
    let svg = line_chart_at("accuracy vs team size", "n", &series, &xs);
    write_atomic(&dir.join("accuracy_vs_n.svg"), svg.as_bytes())?;

    let mut csv = String::from("algorithm,normalized_primary_reward,normalized_hiding_reward\n");
    for r in reports {
        writeln!(
            csv,
            "{},{:.6},{}",
            r.algorithm,
            r.normalized_primary_reward,
            r.normalized_hiding_reward.map_or(String::new(), |h| format!("{h:.6}"))
        )
        .expect("string write");
    }
    write_atomic(&dir.join("reward_bars.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("reward_bars.svg"), bar_chart(reports).as_bytes())?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .expect("string write");
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).expect("string write");
    writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    )
    .expect("string write");
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, PAD - 4.0, y_of(v) + 4.0).expect("string write");
    }
    s
}

fn y_of(v: f64) -> f64 {
    H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<f64>)], xs: std::ops::Range<usize>) -> String {
    let xs: Vec<usize> = xs.collect();
    line_chart_at(title, x_label, series, &xs)
}

/// Each point carries a `<title>` with its value to 3 decimals.
fn line_chart_at(title: &str, x_label: &str, series: &[(String, Vec<f64>)], xs: &[usize]) -> String {
    let mut s = svg_open(title);
    let (lo, hi) = (
        xs.iter().copied().min().unwrap_or(0) as f64,
        xs.iter().copied().max().unwrap_or(1) as f64,
    );
    let span = (hi - lo).max(1.0);
    let x_of = |x: usize| PAD + (x as f64 - lo) / span * (W - 2.0 * PAD);
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label)).expect("string write");
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", x_of(x), y_of(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" ")).expect("string write");
        for (&x, &y) in xs.iter().zip(ys) {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"><title>{} {x_label}={x}: {y:.3}</title></circle>"#,
                x_of(x),
                y_of(y),
                escape(name)
            )
            .expect("string write");
        }
        writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, W - PAD - 100.0, PAD + 14.0 * k as f64, escape(name)).expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

fn bar_chart(reports: &[EvalReport]) -> String {
    let mut s = svg_open("normalized rewards");
    let slot = (W - 2.0 * PAD) / reports.len().max(1) as f64;
    let bw = slot * 0.35;
    for (k, r) in reports.iter().enumerate() {
        let x0 = PAD + slot * k as f64 + slot * 0.1;
        let bars = [("primary", Some(r.normalized_primary_reward), COLORS[0]), ("hiding", r.normalized_hiding_reward, COLORS[1])];
        for (j, (kind, value, color)) in bars.iter().enumerate() {
            let Some(v) = value else { continue };
            let x = x0 + bw * j as f64;
            writeln!(
                s,
                r#"<rect class="bar" data-algorithm="{}" data-metric="{kind}" x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{color}"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#,
                escape(&r.algorithm),
                y_of(*v),
                (H - PAD) - y_of(*v),
                x + bw / 2.0,
                y_of(*v) - 3.0
            )
            .expect("string write");
        }
        writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x0 + bw, H - PAD + 14.0, escape(&r.algorithm)).expect("string write");
    }
    s.push_str("</svg>\n");
    s
}
