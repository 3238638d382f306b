use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use tempfile::TempDir;

const SCENARIO: &str = r#"{
  "seed": 7,
  "campaigns": [
    {
      "label": "alt-https",
      "scanner_count": 5,
      "source_cidr": "88.138.143.0/27",
      "source_location": {"country": "FR", "lat": 48.85, "lon": 2.35},
      "src_port_strategy": "fixed_shared",
      "dst_ports": [30443],
      "target_pool": {"cidr": "133.242.0.0/16", "count": 100}
    },
    {
      "label": "telnet",
      "scanner_count": 4,
      "source_cidr": "45.227.254.0/27",
      "source_location": {"country": "BR", "lat": -23.55, "lon": -46.63},
      "src_port_strategy": "ephemeral_random",
      "dst_ports": [23, 2323],
      "target_pool": {"cidr": "198.18.0.0/16", "count": 80}
    }
  ]
}
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scancamp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// `key=value` from the summary line on stderr.
fn stat(o: &Output, key: &str) -> u64 {
    let text = stderr(o);
    text.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(f.path("scenario.json"), SCENARIO).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn synth(&self, extra: &[&str]) -> Output {
        let mut args = vec![
            "synth".to_string(),
            self.p("scenario.json"),
            "--log-out".into(),
            self.p("conn.log"),
            "--truth-out".into(),
            self.p("truth.tsv"),
            "--geo-out".into(),
            self.p("geo.csv"),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let o = bin().args(&args).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        o
    }
}

fn error_line(o: &Output) -> Vec<String> {
    let text = stderr(o);
    let line = text
        .lines()
        .find(|l| l.starts_with("error\t"))
        .unwrap_or_else(|| panic!("no error line in {text}"));
    line.split('\t').map(str::to_string).collect()
}

#[test]
fn detect_counts_every_generated_probe() {
    let f = Fixture::new();
    let s = f.synth(&[]);
    let d = run(&["detect", &f.p("conn.log"), "-o", &f.p("probes.tsv")]);
    assert!(d.status.success(), "{}", stderr(&d));
    assert_eq!(stat(&d, "probes"), stat(&s, "probes"));
    assert_eq!(stat(&d, "scanners"), 9);
    let probes = fs::read_to_string(f.path("probes.tsv")).unwrap();
    assert_eq!(probes.lines().count() as u64, stat(&s, "probes") + 1);
}

#[test]
fn subnet_restricts_before_aggregation() {
    let f = Fixture::new();
    f.synth(&[]);
    let all = run(&["detect", &f.p("conn.log"), "-o", &f.p("all.tsv")]);
    let jp = run(&[
        "detect",
        &f.p("conn.log"),
        "--subnet",
        "133.242.0.0/16",
        "-o",
        &f.p("jp.tsv"),
    ]);
    assert!(jp.status.success(), "{}", stderr(&jp));
    assert_eq!(stat(&jp, "probes"), 100);
    assert_eq!(stat(&jp, "scanners"), 5);
    assert!(stat(&jp, "probes") < stat(&all, "probes"));
    assert_eq!(stat(&jp, "outside_subnet"), stat(&all, "probes") - 100);
}

#[test]
fn strict_mode_reports_first_bad_line() {
    let f = Fixture::new();
    let log = "#separator \\x09\n#fields\tts\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tconn_state\n\
               1.0\t10.0.0.1\t1\t10.0.0.2\t80\ttcp\tS0\n\
               2.0\t10.0.0.1\tnot-a-port\t10.0.0.2\t80\ttcp\tS0\n\
               3.0\t10.0.0.1\t1\t10.0.0.2\t81\ttcp\tS0\n";
    fs::write(f.path("bad.log"), log).unwrap();
    let o = run(&["detect", &f.p("bad.log"), "--strict"]);
    assert_eq!(o.status.code(), Some(2));
    let err = error_line(&o);
    assert_eq!(err[1], "input");
    assert!(err[2].contains("line 4"), "{err:?}");

    let lenient = run(&["detect", &f.p("bad.log")]);
    assert!(lenient.status.success());
    assert_eq!(stat(&lenient, "malformed"), 1);
    assert_eq!(stat(&lenient, "probes"), 2);
}

#[test]
fn correlate_is_deterministic_across_inputs_and_threads() {
    let f = Fixture::new();
    f.synth(&[]);
    run(&["detect", &f.p("conn.log"), "-o", &f.p("probes.tsv")]);
    let geo = f.p("geo.csv");
    let a = run(&[
        "correlate",
        &f.p("probes.tsv"),
        "--geo-db",
        &geo,
        "--t",
        "0.8",
        "--threads",
        "1",
    ]);
    let b = run(&[
        "correlate",
        &f.p("conn.log"),
        "--geo-db",
        &geo,
        "--t",
        "0.8",
        "--threads",
        "3",
    ]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["campaigns"].as_array().unwrap().len(), 2);

    fs::write(f.path("report.json"), &a.stdout).unwrap();
    let e = run(&["eval", &f.p("report.json"), &f.p("truth.tsv")]);
    let scores: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert_eq!(scores["f1"], 1.0);
}

#[test]
fn exports_matrix_and_dendrogram() {
    let f = Fixture::new();
    f.synth(&[]);
    let o = run(&[
        "correlate",
        &f.p("conn.log"),
        "-o",
        &f.p("r.json"),
        "--matrix-out",
        &f.p("m.tsv"),
        "--dendrogram-out",
        &f.p("d.tsv"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let matrix = fs::read_to_string(f.path("m.tsv")).unwrap();
    assert_eq!(matrix.lines().count(), 10);
    let dendrogram = fs::read_to_string(f.path("d.tsv")).unwrap();
    assert_eq!(
        dendrogram.lines().filter(|l| !l.starts_with('#')).count(),
        8 + 1
    );
}

#[test]
fn empty_probe_set_gives_empty_report() {
    let f = Fixture::new();
    fs::write(
        f.path("empty.tsv"),
        "scanner_ip\tsrc_port\ttarget_ip\ttarget_port\tts\n",
    )
    .unwrap();
    let o = run(&["correlate", &f.p("empty.tsv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["campaigns"].as_array().unwrap().is_empty());

    fs::write(f.path("report.json"), &o.stdout).unwrap();
    fs::write(
        f.path("truth.tsv"),
        "scanner_ip\tlabel\n10.0.0.1\tx\n10.0.0.2\tx\n",
    )
    .unwrap();
    let e = run(&["eval", &f.p("report.json"), &f.p("truth.tsv")]);
    let scores: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert_eq!(scores["recall"], 0.0);
}

#[test]
fn sweeps_are_monotone() {
    let f = Fixture::new();
    f.synth(&[]);
    let o = run(&[
        "sweep-t",
        &f.p("conn.log"),
        "--grid",
        "0:1:0.1",
        "--truth",
        &f.p("truth.tsv"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 11);
    let counts: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert_eq!(counts[0], 1);

    let o = run(&["sweep-epsilon", &f.p("conn.log"), "--grid", "0,5,20,25,100"]);
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows[0][3], "1");
    let fractions: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(fractions.windows(2).all(|w| w[0] >= w[1]), "{fractions:?}");
}

#[test]
fn seed_changes_log_not_schema() {
    let f = Fixture::new();
    f.synth(&[]);
    let first = fs::read_to_string(f.path("conn.log")).unwrap();
    f.synth(&[]);
    assert_eq!(first, fs::read_to_string(f.path("conn.log")).unwrap());
    f.synth(&["--seed", "8"]);
    let other = fs::read_to_string(f.path("conn.log")).unwrap();
    assert_ne!(first, other);
    let header = |s: &str| {
        s.lines()
            .take_while(|l| l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(header(&first), header(&other));
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new();
    f.synth(&[]);
    fs::write(
        f.path("cfg.json"),
        r#"{"t": 0.5, "epsilon": 3, "weights": {"location": 0}}"#,
    )
    .unwrap();
    let o = run(&[
        "correlate",
        &f.p("conn.log"),
        "--config",
        &f.p("cfg.json"),
        "--t",
        "0.9",
        "--weight",
        "subnet=3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let p = &report["parameters"];
    assert_eq!(p["t"], 0.9);
    assert_eq!(p["epsilon"], 3);
    assert_eq!(p["weights"]["location"], 0.0);
    assert_eq!(p["weights"]["subnet"], 3.0);

    let o = run(&[
        "correlate",
        &f.p("conn.log"),
        "--config",
        &f.p("cfg.json"),
        "--scope",
        "enterprise",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["parameters"]["epsilon"], 0);
}

#[test]
fn csv_input_matches_zeek() {
    let f = Fixture::new();
    let zeek = "#separator \\x09\n#fields\tts\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tconn_state\n\
                1.0\t10.0.0.1\t1\t10.0.0.2\t80\ttcp\tS0\n2.0\t10.0.0.1\t1\t10.0.0.3\t80\ttcp\tREJ\n3.0\t10.0.0.5\t9\t10.0.0.2\t80\ttcp\tSF\n";
    let csv = "ts,orig_h,orig_p,resp_h,resp_p,proto,conn_state\n\
               1.0,10.0.0.1,1,10.0.0.2,80,tcp,S0\n2.0,10.0.0.1,1,10.0.0.3,80,tcp,REJ\n3.0,10.0.0.5,9,10.0.0.2,80,tcp,SF\n";
    fs::write(f.path("a.log"), zeek).unwrap();
    fs::write(f.path("a.csv"), csv).unwrap();
    let a = run(&["detect", &f.p("a.log")]);
    let b = run(&["detect", &f.p("a.csv")]);
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stat(&b, "probes"), 2);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let missing = run(&["detect", &f.p("nope.log")]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(error_line(&missing)[1], "input");

    let bad_flag = run(&["detect", "x.log", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(1));
    assert_eq!(error_line(&bad_flag)[1], "usage");

    fs::write(
        f.path("empty.tsv"),
        "scanner_ip\tsrc_port\ttarget_ip\ttarget_port\tts\n",
    )
    .unwrap();
    let empty = f.p("empty.tsv");
    for args in [
        vec!["--t", "1.5"],
        vec!["--weight", "nonsense=1"],
        vec!["--weight", "location"],
        vec!["--subnet", "10.0.0.1/8"],
    ] {
        let mut full = vec!["correlate", empty.as_str()];
        full.extend(args.iter());
        let o = run(&full);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }

    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
}
