use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use picosync::protocol::Transcript;

fn reference() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("config/reference.toml")
}

fn picosync(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_picosync"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 1\n[detector]\ncolour = \"blue\"\n");
    let o = picosync(&["sync-run"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=parse-error"), "{err}");
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn nonpositive_sigma_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 1\n[detector]\nnoise_sigma = -1.0\n");
    let o = picosync(&["sweep-power"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("kind=validation-error") && err.contains("noise_sigma"),
        "{err}"
    );
}

#[test]
fn missing_seed_and_missing_file_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[sync]\npolls = 10\n");
    let o = picosync(&["sync-run"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
    let o = picosync(&["sync-run"], &dir.path().join("absent.toml"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=config-io"));
}

#[test]
fn sync_run_with_equal_noiseless_channels() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "seed = 5\n[detector]\nnoiseless = true\ngain = 1e15\n\
         [alice]\nlength_km = 30.0\n[bob]\nlength_km = 30.0\n",
    );
    let out = dir.path().join("out");
    let o = picosync(&["sync-run"], &config, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("transcript.txt")).unwrap();
    assert_eq!(text.lines().last(), Some("5 InterferenceResult ok"));
    let transcript: Transcript = text.parse().unwrap();
    assert_eq!(transcript.to_string(), text);
    let csv = fs::read_to_string(out.join("sync_run.csv")).unwrap();
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        data[0],
        "t_alice_ps,t_bob_ps,delta_ps,residual_ps,interference_ok,recalibrations,messages_exchanged,seed"
    );
    assert!(data[1].contains(",0,true,0,6,5"), "{}", data[1]);
}

#[test]
fn hopeless_power_is_an_unreachable_target() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "seed = 1\n[detector]\ngain = 1.545129e13\n\
         [sweep_samples]\nlengths_km = [100.0]\npower_dbm = -60.0\ntrials = 50\n",
    );
    let o = picosync(&["sweep-samples"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).starts_with("error kind=unreachable-target"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn header_block_echoes_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_picosync"))
        .args([
            "validate-noise",
            "--trials",
            "1000",
            "--seed",
            "99",
            "--config",
        ])
        .arg(reference())
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("validate_noise.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# picosync "));
    assert!(lines[1].starts_with("# config_hash: ") && lines[1].len() == 15 + 64);
    assert_eq!(lines[2], "# seed: 99");
    assert!(csv.contains("# quantum_efficiency = 0.2"));
    assert!(csv.contains("# attenuation_db_per_km = 0.2"));
    assert!(csv.contains("# window_samples = 1000"));
    let header = lines.iter().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        *header,
        "kind,ratio,n_windows,trials,successes,estimate,stderr,analytic,seed"
    );
}

/// Compares CLI output on the reference config with the files under
/// `tests/golden`. Set `UPDATE_GOLDEN=1` to rewrite them.
#[test]
fn golden_outputs_for_reference_config() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let dir = tempfile::tempdir().unwrap();
    let runs: [(&str, &[&str], &[&str]); 3] = [
        ("sync-run", &[], &["sync_run.csv", "transcript.txt"]),
        ("sweep-power", &["--trials", "100"], &["sweep_power.csv"]),
        (
            "sweep-samples",
            &["--trials", "100"],
            &["sweep_samples.csv", "sweep_samples_coarse.csv"],
        ),
    ];
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (sub, extra, files) in runs {
        let out = dir.path().join(sub);
        let mut args = vec![sub];
        args.extend_from_slice(extra);
        let o = picosync(&args, &reference(), &out);
        assert!(o.status.success(), "{sub}: {}", stderr(&o));
        for file in files {
            let actual = fs::read_to_string(out.join(file)).unwrap();
            let path = golden.join(file);
            if update {
                fs::write(&path, &actual).unwrap();
                continue;
            }
            let expected = fs::read_to_string(&path).unwrap();
            assert_eq!(actual, expected, "{file} differs from its golden copy");
        }
    }
}
