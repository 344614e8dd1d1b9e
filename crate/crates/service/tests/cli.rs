use clap::Parser;
use fracsls::bo::Session;
use fracsls_service::cli::{read_transcript, run, Cli, Command};

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("fracsls").chain(args.iter().copied())).unwrap()
}

#[test]
fn arguments_parse() {
    let cli = parse(&["--seed", "4", "passivity", "--k0", "-3.1", "--alpha", "0.5"]);
    assert_eq!(cli.seed, 4);
    match cli.command {
        Command::Passivity(p) => {
            assert_eq!(p.k0, -3.1);
            assert_eq!(p.alpha, 0.5);
            assert_eq!(p.k1, 5.70);
        }
        other => panic!("{other:?}"),
    }
    match parse(&["slices", "--aggregate", "a", "--alpha", "0.1,0.3"]).command {
        Command::Slices { alpha, res, .. } => {
            assert_eq!(alpha, vec![0.1, 0.3]);
            assert_eq!(res, None);
        }
        other => panic!("{other:?}"),
    }
    match parse(&["aggregate", "--sessions", "sess-1,sess-2"]).command {
        Command::Aggregate { sessions, .. } => assert_eq!(sessions, vec!["sess-1", "sess-2"]),
        other => panic!("{other:?}"),
    }
    assert!(Cli::try_parse_from(["fracsls", "coeffs"]).is_err());
}

#[test]
fn study_pipeline_runs_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("study.json");
    std::fs::write(
        &config,
        r#"{"session": {"search_space": {"bounds": {"k0": [-15.7, 0.44], "k1": [1.0, 32.0], "b1": [0.001, 32.0], "alpha": [0.01, 0.99]},
             "stiffness": {"omega_eff": 4.5457, "target_keff": 0.4522},
             "passivity": {"device_damping": 0.01, "freq_grid_points": 1024, "sample_time": 0.001}},
           "gp": {"kernel_theta": 30.0, "ordinal_noise": 0.5, "thresholds": [-0.5, 0.5], "jitter": 1e-8},
           "acquisition": {"lambda": 0.7, "n_space_filling": 5, "n_total": 8, "candidate_count": 128, "candidate_seed": 0}},
           "grid_density": 6}"#,
    )
    .unwrap();
    let go = |args: &[&str]| {
        let mut full = vec!["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        full.extend_from_slice(args);
        run(parse(&full)).unwrap();
    };

    go(&["simulate"]);
    assert!(out.join("relaxation.csv").exists() && out.join("creep.csv").exists());

    go(&["--seed", "1", "hil"]);
    go(&["--seed", "2", "hil"]);
    let session_file = out.join("sessions/sess-1.json");
    let session: Session = serde_json::from_str(&std::fs::read_to_string(&session_file).unwrap()).unwrap();
    assert_eq!(session.trials.len(), 8);
    assert_eq!(read_transcript(&session_file).unwrap(), session.transcript());

    // replaying the transcript reproduces the file byte for byte
    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, serde_json::to_string(&session.transcript()).unwrap()).unwrap();
    let replay = dir.path().join("replay");
    run(parse(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
        "--seed",
        "1",
        "hil",
        "--oracle",
        &format!("transcript:{}", labels.display()),
    ]))
    .unwrap();
    assert_eq!(std::fs::read(&session_file).unwrap(), std::fs::read(replay.join("sessions/sess-1.json")).unwrap());

    go(&["aggregate", "--id", "pilot"]);
    assert!(out.join("aggregates/pilot.json").exists());
    go(&["slices", "--aggregate", "pilot", "--alpha", "0.2", "--res", "5"]);
    let csv = std::fs::read_to_string(out.join("slices/pilot_alpha_0.2.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "k1_norm,b1_norm,mean,variance,feasible");
    assert_eq!(csv.lines().count(), 26);
    go(&["validate", "--aggregate", "pilot", "--participants", "3"]);
    assert!(out.join("aggregates/pilot_validation.json").exists());
}
