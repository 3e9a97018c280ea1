use covert_leader::adversary::AdversaryParams;
use covert_leader::baselines::{quantize, scripted_pd_act, PdGains};
use covert_leader::env::{Action, Env, EnvConfig};
use covert_leader::evalkit::*;
use covert_leader::policy::{ActMode, PolicyConfig, PolicyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env(horizon: usize) -> EnvConfig {
    EnvConfig {
        horizon,
        ..EnvConfig::default()
    }
}

fn adversary() -> AdversaryParams {
    AdversaryParams::init(&mut ChaCha8Rng::seed_from_u64(1), 14, true)
}

fn learned() -> PolicySource {
    PolicySource::Learned(PolicyParams::init(&mut ChaCha8Rng::seed_from_u64(2), &PolicyConfig::default()))
}

#[test]
fn traces_replay_bit_exactly() {
    let cfg = env(15);
    let e = Env::new(cfg.clone()).unwrap();
    let eps = rollout_episodes(&learned(), &cfg, Some(&adversary()), 4, 3, 3, ActMode::Sample).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let entries = export_traces(&eps, "hiding", dir.path()).unwrap();
    assert_eq!(entries.len(), 3);
    for (ep, entry) in eps.iter().zip(&entries) {
        let trace = EpisodeTrace::parse(&std::fs::read(dir.path().join(format!("{}.json", entry.id))).unwrap()).unwrap();
        assert_eq!((trace.n, trace.horizon, trace.leader), (4, 15, ep.initial.leader));
        // re-simulate from the initial state with the recorded actions
        let mut s = ep.initial.clone();
        for step in &trace.steps {
            let actions: Vec<Action> = step.actions.iter().map(|&k| Action::ALL[k]).collect();
            s = e.step(&s, &actions).unwrap().0;
            let pos: Vec<[f64; 2]> = s.agents.iter().map(|a| a.position).collect();
            assert_eq!(pos, step.positions, "t={}", step.t);
            let probs = step.adversary_probs.as_ref().unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(s, ep.final_state);
    }
    let index = TraceIndex::load_or_default(dir.path()).unwrap();
    assert_eq!(index.traces, entries);
    // re-export merges instead of duplicating
    export_traces(&eps[..1], "hiding", dir.path()).unwrap();
    assert_eq!(TraceIndex::load_or_default(dir.path()).unwrap().traces.len(), 3);
}

#[test]
fn trace_parse_rejects_unknown_version() {
    let cfg = env(5);
    let eps = rollout_episodes(&PolicySource::Idle, &cfg, None, 3, 1, 4, ActMode::Greedy).unwrap();
    let mut trace = EpisodeTrace::from_episode(&eps[0]);
    trace.version = "trace-v0".into();
    assert!(EpisodeTrace::parse(&serde_json::to_vec(&trace).unwrap()).is_err());
}

#[test]
fn plots_are_consistent_with_reports() {
    let cfg = env(12);
    let adv = adversary();
    let sources = [learned(), PolicySource::Scripted(PdGains::default()), PolicySource::RandomWalk];
    let reports: Vec<EvalReport> = sources.iter().map(|s| evaluate(s, Some(&adv), &cfg, 4, 6, 0.2, 5).unwrap()).collect();
    let sweep = team_size_sweep(&sources[1], &adv, &cfg, &[3, 5], 4, 0.2, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_plots(&reports, &sweep, dir.path()).unwrap();
    for stem in PLOT_STEMS {
        assert!(dir.path().join(format!("{stem}.csv")).exists());
        assert!(dir.path().join(format!("{stem}.svg")).exists());
    }

    let mut rdr = csv::Reader::from_path(dir.path().join("accuracy_vs_time.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), cfg.horizon);
    for (t, row) in rows.iter().enumerate() {
        for (k, r) in reports.iter().enumerate() {
            let v: f64 = row[k + 1].parse().unwrap();
            assert!((v - r.accuracy_curve[t]).abs() < 1e-6);
        }
    }

    let mut rdr = csv::Reader::from_path(dir.path().join("accuracy_vs_n.csv")).unwrap();
    assert_eq!(rdr.records().count(), 2);

    let svg = std::fs::read_to_string(dir.path().join("reward_bars.svg")).unwrap();
    let bars = svg.matches(r#"class="bar""#).count();
    assert_eq!(bars, 2 * reports.len());
    for r in &reports {
        for (metric, v) in [("primary", r.normalized_primary_reward), ("hiding", r.normalized_hiding_reward.unwrap())] {
            let tag = format!(r#"data-algorithm="{}" data-metric="{metric}""#, r.algorithm);
            let at = svg.find(&tag).unwrap_or_else(|| panic!("missing {tag}"));
            let label = format!(">{v:.3}</text>");
            let line_end = at + svg[at..].find('\n').unwrap();
            assert!(svg[at..line_end].contains(&label), "{tag} should be labelled {v:.3}");
        }
    }

    let mut rdr = csv::Reader::from_path(dir.path().join("reward_bars.csv")).unwrap();
    for (row, r) in rdr.records().map(Result::unwrap).zip(&reports) {
        assert_eq!(&row[0], r.algorithm);
        let v: f64 = row[1].parse().unwrap();
        assert_eq!(format!("{v:.3}"), format!("{:.3}", r.normalized_primary_reward));
    }
}

#[test]
fn report_metrics_are_normalized() {
    let cfg = env(30);
    let adv = adversary();
    for source in [learned(), PolicySource::Scripted(PdGains::default()), PolicySource::RandomWalk, PolicySource::Idle] {
        let r = evaluate(&source, Some(&adv), &cfg, 5, 8, 0.2, 7).unwrap();
        assert!((0.0..=1.0).contains(&r.normalized_primary_reward));
        let h = r.normalized_hiding_reward.unwrap();
        assert!((0.0..=1.0).contains(&h));
        assert!((r.mean_step_accuracy.unwrap() + h - 1.0).abs() < 1e-12);
        assert_eq!(r.accuracy_curve.len(), 30);
        assert_eq!(r.adversary_accuracy, r.accuracy_curve.last().copied());
    }
}

#[test]
fn scripted_baseline_beats_random_walk() {
    let cfg = EnvConfig::default();
    let pd = evaluate(&PolicySource::Scripted(PdGains::default()), None, &cfg, 6, 20, 0.2, 8).unwrap();
    let rw = evaluate(&PolicySource::RandomWalk, None, &cfg, 6, 20, 0.2, 8).unwrap();
    assert!(pd.normalized_primary_reward > rw.normalized_primary_reward + 0.3);
    assert!(pd.goal_reached_fraction >= 0.9);
    assert_eq!(pd.parameter_count, 0);
}

#[test]
fn pd_quantization_and_routing() {
    assert_eq!(quantize([0.01, 0.0], 0.05), Action::Noop);
    assert_eq!(quantize([0.3, -0.2], 0.05), quantize([1.0, 0.0], 0.05));
    assert_eq!(quantize([0.2, 0.2], 0.05), quantize([0.2, 0.0], 0.05));
    assert_ne!(quantize([0.0, 0.2], 0.05), quantize([0.0, -0.2], 0.05));
    let e = Env::new(EnvConfig::default()).unwrap();
    let s = e.reset(9, 5).unwrap();
    assert_eq!(scripted_pd_act(&s, &PdGains::default()).len(), 5);
}

#[test]
fn sweep_rejects_tiny_teams_and_env_mismatch_is_flagged() {
    let cfg = env(5);
    assert!(team_size_sweep(&PolicySource::Idle, &adversary(), &cfg, &[1, 3], 2, 0.2, 1).is_err());
    let a = serde_json::json!({ "env": cfg });
    let b = serde_json::json!({ "env": env(6) });
    let path = std::path::Path::new("x.json");
    assert!(ensure_same_env(&a, &a, path).is_ok());
    assert!(matches!(ensure_same_env(&a, &b, path), Err(covert_leader::Error::Integrity { .. })));
}
