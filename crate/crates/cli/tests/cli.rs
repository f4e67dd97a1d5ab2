use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name).display().to_string()
}

fn trendlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trendlab")).args(args).env_remove("TRENDLAB_SEED").output().unwrap()
}

fn json(args: &[&str]) -> Value {
    let out = trendlab(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn temp_file(name: &str, contents: &str) -> String {
    let path = std::env::temp_dir().join(format!("trendlab-cli-{}-{name}", std::process::id()));
    std::fs::write(&path, contents).unwrap();
    path.display().to_string()
}

#[test]
fn trend_json_has_three_components_and_prefers_ordinal() {
    let input = data("acrylamide.csv");
    let v = json(&[
        "trend",
        "--input",
        &input,
        "--link",
        "logit",
        "--scaling",
        "ari,ord,log",
        "--alternative",
        "greater",
        "--pseudo-count",
        "0.5",
        "--format",
        "json",
    ]);
    for key in ["command", "config", "components", "best", "warnings", "seed", "n", "m"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["command"], "trend");
    assert_eq!(v["components"].as_array().unwrap().len(), 3);
    assert_eq!(v["best_metameter"], "ord");
    assert_eq!(v["best"], "OR:ord");
    assert_eq!(v["seed"], 20240101);
    assert_eq!((v["n"].as_u64(), v["m"].as_u64()), (Some(5), Some(3)));
    let ari = &v["components"][0];
    assert!((ari["adjusted_p"].as_f64().unwrap() - 0.00833).abs() < 0.001);
}

#[test]
fn catest_on_flat_two_groups() {
    let input = temp_file("flat.csv", "dose,events,trials\n0,2,10\n1,2,10\n");
    let v = json(&["catest", "--input", &input, "--alternative", "greater", "--format", "json"]);
    assert_eq!(v["statistic"].as_f64(), Some(0.0));
    assert_eq!(v["p_value"].as_f64(), Some(0.5));
}

#[test]
fn links_reports_nine_components_led_by_risk_difference() {
    let input = data("acrylamide.csv");
    let v = json(&[
        "links",
        "--input",
        &input,
        "--link",
        "logit,identity,log",
        "--scaling",
        "ari,ord,log",
        "--format",
        "json",
    ]);
    assert_eq!(v["components"].as_array().unwrap().len(), 9);
    assert_eq!(v["best_effect_size"], "RD");
    let tied: Vec<&str> = v["tied_best"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert!(tied.contains(&"RD:log"));
}

#[test]
fn json_reruns_are_byte_identical() {
    let input = data("flutrimazole.csv");
    let args = ["joint", "--input", &input, "--format", "json"];
    let (a, b) = (trendlab(&args), trendlab(&args));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn text_and_json_carry_the_same_numbers() {
    let input = data("orobanche.csv");
    let base = ["overdisp", "--input", &input, "--alternative", "less"];
    let v = json(&[&base[..], &["--format", "json"]].concat());
    let text = String::from_utf8(trendlab(&base).stdout).unwrap();
    let exact: Vec<&str> = text.lines().skip_while(|l| *l != "exact values:").skip(1).collect();
    let components = v["components"].as_array().unwrap();
    for c in components {
        let label = c["label"].as_str().unwrap();
        let line = exact.iter().find(|l| l.split('\t').next() == Some(label)).unwrap();
        for field in line.split('\t').skip(1) {
            let (key, value) = field.split_once('=').unwrap();
            match value {
                "none" => assert!(c[key].is_null(), "{label} {key}"),
                _ => {
                    let parsed: f64 = value.parse().unwrap();
                    let expected = c[key].as_f64().unwrap();
                    assert!((parsed - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{label} {key}");
                }
            }
        }
    }
    let crit = exact.iter().find_map(|l| l.strip_prefix("critical_value=")).unwrap();
    assert!((crit.parse::<f64>().unwrap() - v["critical_value"].as_f64().unwrap()).abs() <= 1e-12);
}

#[test]
fn csv_has_one_row_per_component() {
    let input = data("acrylamide.csv");
    let out = trendlab(&["links", "--input", &input, "--link", "identity,log", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[0], "label");
    let labels: Vec<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(labels, ["RD:ari", "RD:ord", "RD:log", "RR:ari", "RR:ord", "RR:log"]);
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let input = data("acrylamide.csv");
    let run = |env: Option<&str>, extra: &[&str]| -> Value {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_trendlab"));
        cmd.args(["trend", "--input", &input, "--format", "json"]).args(extra).env_remove("TRENDLAB_SEED");
        if let Some(seed) = env {
            cmd.env("TRENDLAB_SEED", seed);
        }
        serde_json::from_slice(&cmd.output().unwrap().stdout).unwrap()
    };
    assert_eq!(run(None, &[])["seed"], 20240101);
    assert_eq!(run(Some("7"), &[])["seed"], 7);
    assert_eq!(run(Some("7"), &["--seed", "11"])["seed"], 11);
}

#[test]
fn report_can_be_written_to_a_file() {
    let input = data("acrylamide.csv");
    let path = std::env::temp_dir().join(format!("trendlab-cli-{}-report.json", std::process::id()));
    let path_str = path.display().to_string();
    let out = trendlab(&["trend", "--input", &input, "--format", "json", "--output", &path_str]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["config"]["output"], path_str.as_str());
}

#[test]
fn exit_codes() {
    let input = data("acrylamide.csv");
    let code = |args: &[&str]| trendlab(args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["trend", "--input", &input, "--bogus"]), 2);
    assert_eq!(code(&["trend", "--input", "/nonexistent/table.csv"]), 2);
    assert_eq!(code(&["trend", "--input", &input, "--level", "0.5"]), 2);
    assert_eq!(code(&["trend", "--input", &input, "--level", "1"]), 2);
    assert_eq!(code(&["trend", "--input", &input, "--mvn-tol", "0"]), 2);
    assert_eq!(code(&["trend", "--input", &input, "--mvn-tol", "0.02"]), 2);
    assert_eq!(code(&["trend", "--input", &input, "--scaling", "sqrt"]), 2);
    assert_eq!(code(&["trend", "--input", &input, "--pseudo-count", "-1"]), 2);
    assert_eq!(code(&["trend", "--input", &input, "--zero-dose", "fixed:0"]), 2);
    assert_eq!(code(&["overdisp", "--input", &input]), 2);
    let bad = temp_file("bad.csv", "dose,events,trials\n0,12,10\n1,2,10\n");
    assert_eq!(code(&["catest", "--input", &bad]), 2);
    let zero = temp_file("zero.csv", "dose,events,trials\n0,0,10\n1,0,10\n");
    assert_eq!(code(&["catest", "--input", &zero]), 3);
}

#[test]
fn run_returns_exit_code_without_spawning() {
    let input = data("acrylamide.csv");
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = trendlab_cli::execute(["trendlab", "catest", "--input", &input], &mut out, &mut err);
    assert_eq!(code, trendlab_cli::EXIT_OK);
    assert!(String::from_utf8(out).unwrap().contains("p-value"));
    let code = trendlab_cli::execute(["trendlab", "nonsense"], &mut Vec::new(), &mut err);
    assert_eq!(code, trendlab_cli::EXIT_USAGE);
}
