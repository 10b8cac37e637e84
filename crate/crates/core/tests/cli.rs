use std::path::Path;
use std::process::{Command, Output};

fn hrn(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hrn"));
    cmd.current_dir(dir).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_output_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = hrn(dir.path(), &["config"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(dir.path().join("run.json"), &o.stdout).unwrap();
    let env = [("HRN_SCENARIO__N_TRAJECTORIES", "0")];
    let again = hrn(dir.path(), &["--config", "run.json", "gen"], &env);
    assert!(again.status.success(), "{}", stderr(&again));
}

#[test]
fn misspelled_override_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = hrn(dir.path(), &["gen"], &[("HRN_OPTIM__EPOCHZ", "3")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.epochz"), "{}", stderr(&o));
}

#[test]
fn bad_config_file_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"optim": {"lr": "fast"}}"#).unwrap();
    let o = hrn(dir.path(), &["--config", "run.json", "gen"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.lr"), "{}", stderr(&o));
}

#[test]
fn missing_data_dir_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = hrn(dir.path(), &["train", "--data", "nowhere"], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn gen_writes_one_file_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let env = [
        ("HRN_SCENARIO__NAME", "zero-g-collide"),
        ("HRN_SCENARIO__N_TRAJECTORIES", "3"),
        ("HRN_SCENARIO__N_FRAMES", "5"),
    ];
    let o = hrn(dir.path(), &["--seed", "4", "--out", "data", "gen"], &env);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["zero-g-collide-000004.hrnt", "zero-g-collide-000005.hrnt", "zero-g-collide-000006.hrnt"]
    );
}

#[test]
fn malformed_trajectory_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    std::fs::write(dir.path().join("data").join("x.hrnt"), b"HRNTgarbage").unwrap();
    let o = hrn(dir.path(), &["train", "--data", "data"], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
