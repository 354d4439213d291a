use mpmp_cli::{parse_config, Scenario};

fn errors(text: &str) -> Vec<String> {
    parse_config(text).expect_err("config should be rejected").0
}

#[test]
fn minimal_config_takes_defaults() {
    let c = parse_config(r#"scenario = "example1""#).unwrap();
    assert_eq!(c.scenario, Scenario::Example1);
    assert_eq!((c.steps, c.paths, c.dump_paths), (400, 20_000, 10));
    assert_eq!(c.horizon, 1.0);
    assert_eq!(c.example1.steps, 400);
    assert_eq!(c.example1.beta.as_slice(), &[0.6, -0.4, 0.3, 0.2]);
    assert!(!c.faults.any());
}

#[test]
fn every_scenario_name_parses() {
    for s in Scenario::ALL {
        let c = parse_config(&format!("scenario = {:?}", s.name())).unwrap();
        assert_eq!(c.scenario, s);
    }
}

#[test]
fn shipped_configs_are_valid() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 8);
}

#[test]
fn zero_steps_is_rejected() {
    let e = errors("scenario = \"example1\"\n[grid]\nsteps = 0\n");
    assert!(
        e.iter().any(|m| m == "grid.steps: must be positive"),
        "{e:?}"
    );
}

#[test]
fn ambiguous_policy_is_rejected() {
    let e = errors(
        "scenario = \"example2\"\n[lq]\nopen_loop = [1.0]\nfeedback_gain = [[-0.5]]\nfeedback_offset = [0.0]\n",
    );
    assert!(e.iter().any(|m| m.contains("ambiguous")), "{e:?}");
}

#[test]
fn unknown_keys_and_scenarios_are_named() {
    let e = errors("scenario = \"nope\"\ncolour = 3\n[grid]\nstep = 10\n");
    assert!(
        e.iter()
            .any(|m| m.starts_with("scenario: unknown scenario \"nope\"")),
        "{e:?}"
    );
    assert!(e.iter().any(|m| m == "colour: unknown key"), "{e:?}");
    assert!(e.iter().any(|m| m == "grid.step: unknown key"), "{e:?}");
}

#[test]
fn all_errors_are_reported_together() {
    let e =
        errors("paths = 0\n[grid]\nsteps = 0\nhorizon = -1.0\n[bilinear]\ncontrol_bound = -2.0\n");
    for want in [
        "scenario: missing",
        "paths: must be positive",
        "grid.steps: must be positive",
        "grid.horizon: must be positive",
        "bilinear.control_bound: must be positive",
    ] {
        assert!(e.iter().any(|m| m == want), "missing {want:?} in {e:?}");
    }
}

#[test]
fn shapes_are_checked_against_the_space() {
    let e = errors("scenario = \"example1\"\n[space]\nstate_dim = 3\ncontrol_dim = 2\n");
    assert!(e.iter().any(|m| m.contains("expected 3")), "{e:?}");
}

#[test]
fn spikes_must_align_with_the_grid() {
    let e = errors(
        "scenario = \"example1\"\n[grid]\nsteps = 10\n[experiment]\nspikes = [{ t0 = 0.33, eps = 0.1, v = [0.0, 0.0] }]\n",
    );
    assert!(
        e.iter().any(|m| m.starts_with("experiment.spikes[0]")),
        "{e:?}"
    );
}

#[test]
fn faults_are_parsed() {
    let c = parse_config("scenario = \"rates\"\n[faults]\np_scale = 2.0\nconcave_cost = true\n")
        .unwrap();
    assert!(c.faults.any() && c.faults.concave_cost);
    assert_eq!(c.faults.p_scale, Some(2.0));
    let e = errors("scenario = \"derivative-check\"\n[faults]\nderivative = \"Q\"\n");
    assert!(
        e.iter().any(|m| m.starts_with("faults.derivative")),
        "{e:?}"
    );
}

#[test]
fn syntax_errors_are_reported() {
    let e = errors("scenario = ");
    assert!(e[0].starts_with("syntax:"));
}
