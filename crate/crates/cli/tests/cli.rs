use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use homog::schema::Schema;

const CONFIG: &str = r#"
domain = "interval"
epsilons = [0.25, 0.125, 0.0625, 0.03125]
seed = 11

[mesh]
cells_per_period = 8

[tensor]
diagonal = { cells = [2], values = [1.0, 4.0] }

[[nonlinearity]]
alpha = 1
i = 1
g = "0.5*sin(2*pi*x)"
p0 = 4

[[nonlinearity]]
alpha = 1
i = 1
g = 0.25
p0 = 4
h = { polynomial = [[1.0, 2]] }

[probe]
uniqueness_trials = 3
"#;

fn homog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homog")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("problem.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn sweep_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, threads) in [(&a, "1"), (&b, "4")] {
        let o = homog(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["sweep.csv", "uniqueness.csv", "homogenized.json", "run.log"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let table = Schema::load().unwrap().read("sweep", &a.join("sweep.csv")).unwrap();
    assert_eq!(table.rows_where("kind", "data").unwrap().len(), 4);
    let fit = table.rows_where("kind", "rate_fit").unwrap();
    assert_eq!(fit.len(), 1);
    assert_eq!(table.str(fit[0], "status").unwrap(), "ok");
    let u = Schema::load().unwrap().read("uniqueness", &a.join("uniqueness.csv")).unwrap();
    assert_eq!(u.len(), 12);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("o");
    let o = homog(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "100"]);
    assert!(o.status.success());
    let u = Schema::load().unwrap().read("uniqueness", &out.join("uniqueness.csv")).unwrap();
    assert_eq!(u.str(0, "seed").unwrap(), "100");
}

#[test]
fn unknown_key_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("[mesh]", "[meshh]"));
    let o = homog(&["sweep", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("meshh"));
}

#[test]
fn solve_and_homogenize_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("s");
    let o = homog(&["solve", "--config", &cfg, "--out", out.to_str().unwrap(), "--eps", "0.125"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sol = Schema::load().unwrap().read("solution", &out.join("solution.csv")).unwrap();
    assert_eq!(sol.len(), 65);

    let out = dir.path().join("h");
    assert!(homog(&["homogenize", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let json = fs::read_to_string(out.join("homogenized.json")).unwrap();
    assert!(json.contains("\"tensor\""));
}

#[test]
fn probe_writes_schema_conformant_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("[[nonlinearity]]\nalpha = 1\ni = 1\ng = 0.25\np0 = 4\nh = { polynomial = [[1.0, 2]] }\n", ""));
    let out = dir.path().join("p");
    let o = homog(&["probe", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let schema = Schema::load().unwrap();
    let h = schema.read("hconv", &out.join("hconv.csv")).unwrap();
    assert!(!h.is_empty());
    let m = schema.read("meyers", &out.join("meyers.csv")).unwrap();
    assert_eq!(m.rows_where("kind", "observed_range").unwrap().len(), 1);
}

#[test]
fn outside_hypotheses_warning_is_printed() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
domain = "interval"
components = 2
epsilons = [0.25]

[tensor]
diagonal = 1.0
entries = [{ alpha = 2, beta = 1, i = 1, j = 1, value = 0.1 }]
"#;
    let cfg = write_config(dir.path(), text);
    let o = homog(&["homogenize", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outside Theorem 1 hypotheses"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = fs::read_to_string(&path).unwrap();
            let cfg = homog::config::parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(cfg.warnings.is_empty(), "{}: {:?}", path.display(), cfg.warnings);
            count += 1;
        }
    }
    assert!(count >= 3);
}
