//! End-to-end runs of the `lsi-lab` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsi_core::config::ExperimentConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn lab(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsi-lab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("LSI_LAB_OUT")
        .output()
        .unwrap()
}

fn small_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = fs::read_to_string(configs().join("constant_eta_counting.toml")).unwrap();
    let path = dir.join("config.toml");
    fs::write(&path, edit(text.replace("n_paths = 20000", "n_paths = 2000").replace("mc_paths = 20000", "mc_paths = 2000"))).unwrap();
    path
}

#[test]
fn all_on_constant_eta_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = lab(&["all"], &configs().join("constant_eta_counting.toml"), &out);
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(run.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.lines().all(|l| l.contains("PASS")));
    for name in ["gamma.csv", "residuals.csv", "paths.csv", "marginals.csv", "reports.jsonl", "run.log"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let header = fs::read_to_string(out.join("gamma.csv")).unwrap();
    assert!(header.starts_with("# config_hash="));
    assert!(header.lines().nth(1) == Some("state,t,gamma"));
    let paths = fs::read_to_string(out.join("paths.csv")).unwrap();
    assert_eq!(paths.lines().nth(1), Some("path_id,k,tau,jump,state_after"));
    assert!(fs::read_to_string(out.join("reports.jsonl")).unwrap().contains("\"config_hash\""));
}

#[test]
fn stepwise_commands_match_all() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t);
    let steps = dir.path().join("steps");
    let whole = dir.path().join("whole");
    for cmd in ["solve", "simulate", "check"] {
        let run = lab(&[cmd], &config, &steps);
        assert_eq!(run.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&run.stderr));
    }
    assert_eq!(lab(&["all"], &config, &whole).status.code(), Some(0));
    for name in ["gamma.csv", "paths.csv", "marginals.csv", "reports.jsonl"] {
        assert_eq!(fs::read(steps.join(name)).unwrap(), fs::read(whole.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn check_refuses_gamma_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t);
    let out = dir.path().join("out");
    assert_eq!(lab(&["solve"], &config, &out).status.code(), Some(0));
    let other = dir.path().join("other.toml");
    fs::write(&other, fs::read_to_string(&config).unwrap().replace("value = 1.5", "value = 1.25")).unwrap();
    let run = lab(&["check"], &other, &out);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("provenance"));
    let reseeded = Command::new(env!("CARGO_BIN_EXE_lsi-lab"))
        .args(["check", "--seed", "99", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(reseeded.status.code(), Some(2));
}

#[test]
fn validation_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t.replace("[solver]", "nu = { atoms = [1.0, -1.0], probs = [0.5, 0.5] }\n\n[solver]"));
    let run = lab(&["solve"], &config, &dir.path().join("out"));
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("solver.mode"));
}

#[test]
fn non_convergence_exits_nonzero_and_keeps_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| {
        t.replace(r#"kind = "constant", value = 1.5"#, r#"kind = "two-state-markov", low = 1.0, high = 2.0, rate_up = 1.0, rate_down = 1.0"#)
            .replace("mode = \"counting\"", "mode = \"counting\"\ntol = 1e-12\nmax_iter = 1")
    });
    let out = dir.path().join("out");
    let run = lab(&["solve"], &config, &out);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("did not converge"));
    let trace = fs::read_to_string(out.join("residuals.csv")).unwrap();
    assert!(trace.lines().count() >= 3);
}

#[test]
fn output_directory_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t);
    let target = dir.path().join("from_env");
    let run = Command::new(env!("CARGO_BIN_EXE_lsi-lab"))
        .args(["solve", "--config"])
        .arg(&config)
        .env("LSI_LAB_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert!(target.join("gamma.csv").is_file());
}

#[test]
fn demo_writes_two_section_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("demo.toml")).unwrap().replace("n_paths = 100000", "n_paths = 5000");
    let config = dir.path().join("demo.toml");
    fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    let run = lab(&["demo-nonuniqueness"], &config, &out);
    assert!(matches!(run.status.code(), Some(0 | 1)));
    let report = fs::read_to_string(out.join("demo_report.jsonl")).unwrap();
    for key in ["cox_first_jump_ks", "reused_clock_ks_p", "cox_marginal_tv", "reused_clock_marginal_tv"] {
        assert!(report.contains(key), "{key}");
    }
    let ecdf = fs::read_to_string(out.join("demo_ecdf.csv")).unwrap();
    assert_eq!(ecdf.lines().nth(1), Some("x,cox_first_jump,reused_clock_first_arrival,exp1"));
}

#[test]
fn shipped_configs_round_trip() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let config = ExperimentConfig::load(&path).unwrap();
        let text = config.to_toml_string();
        let again = ExperimentConfig::from_toml_str(&text, &config.base_dir).unwrap();
        assert_eq!(config, again, "{}", path.display());
        assert_eq!(config.hash().unwrap(), again.hash().unwrap());
    }
}
