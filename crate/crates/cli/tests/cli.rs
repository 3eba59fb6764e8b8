use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rmsim::augment::{sha256_file, CaseEntry, CasesManifest};
use rmsim::metrics::{ssim_report, SsimReport};
use rmsim::model::load_model;
use rmsim::mhd::read_volume;
use rmsim::phantom::{Ellipsoid, PhantomSequence, PhantomSpec};
use rmsim::trace::BreathingTrace;
use serde_json::Value;

fn rmsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = rmsim(&[&["--print-summary"], args].concat());
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn code(args: &[&str]) -> i32 {
    rmsim(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_spec(phases: usize) -> PhantomSpec {
    PhantomSpec {
        dims: [8, 8, 8],
        spacing: [4.0; 3],
        lungs: vec![Ellipsoid {
            center: [14.0, 14.0, 16.0],
            radii: [8.0, 8.0, 10.0],
        }],
        apex: [12.0, 12.0, 4.0],
        tumor_center: [14.0, 14.0, 14.0],
        tumor_radius: 3.0,
        phases,
        ..PhantomSpec::default()
    }
}

fn write_spec(dir: &Path, spec: &PhantomSpec) -> PathBuf {
    let p = dir.join("spec.json");
    fs::write(&p, serde_json::to_string(spec).unwrap()).unwrap();
    p
}

fn make_phantom(dir: &Path, name: &str, spec: &PhantomSpec) -> PathBuf {
    let spec_path = write_spec(dir, spec);
    let out = dir.join(name);
    ok(&["phantom", "--spec", s(&spec_path), "--out", s(&out)]);
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn phantom_writes_layout_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let summary = ok(&["phantom", "--out", s(&a), "--phases", "4"]);
    assert_eq!(summary["phases"], 4);
    for t in 0..4 {
        for f in [format!("phase_{t}.mhd"), format!("mask_{t}.mhd"), format!("landmarks_{t}.csv")] {
            assert!(a.join(f).exists());
        }
    }
    for t in 1..4 {
        assert!(a.join(format!("dvf_{t}.dz.mhd")).exists());
    }
    assert!(!a.join("dvf_0.dz.mhd").exists());
    assert!(a.join("trace.csv").exists());

    let b = tmp.path().join("b");
    ok(&["--seed", "0", "phantom", "--out", s(&b), "--phases", "4"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let still = ok(&["phantom", "--out", s(&tmp.path().join("c")), "--amplitude", "0", "--phases", "4"]);
    let hashes = still["phase_sha256"].as_array().unwrap();
    assert!(hashes.iter().all(|h| h == &hashes[0]));
}

#[test]
fn phantom_rejects_bad_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"phases": 1}"#).unwrap();
    assert_eq!(code(&["phantom", "--spec", s(&bad), "--out", s(&tmp.path().join("o"))]), 1);
    fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(code(&["phantom", "--spec", s(&bad), "--out", s(&tmp.path().join("o"))]), 1);
    assert_eq!(code(&["phantom"]), 1);
    assert_eq!(code(&["phantom", "--spec", s(&tmp.path().join("missing.json")), "--out", "x"]), 3);
}

#[test]
fn threads_variable_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_rmsim"))
        .args(["trace", "rescale", "--input", "x", "--factor", "1", "--out", "y"])
        .env("RMSIM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_phantom(tmp.path(), "data", &tiny_spec(3));
    let ck = |n: &str| tmp.path().join(n);
    assert_eq!(
        code(&["train", "--data", s(&data), "--out", s(&ck("z.ckpt")), "--epochs", "0"]),
        1
    );
    let run = |name: &str| {
        ok(&[
            "--seed", "5", "train", "--data", s(&data), "--out", s(&ck(name)), "--epochs", "3", "--channels", "2",
            "--lr", "0.01",
        ])
    };
    let a = run("a.ckpt");
    let b = run("b.ckpt");
    assert_eq!(a["checkpoint_sha256"], b["checkpoint_sha256"]);
    assert!(a["final_loss"].as_f64().unwrap().is_finite());
    assert!(ck("a.ckpt.log.csv").exists());
    assert!(ck("a.ckpt.manifest.json").exists());

    assert_eq!(
        code(&[
            "train", "--data", s(&data), "--out", s(&ck("nan.ckpt")), "--epochs", "5", "--channels", "2", "--lr",
            "1e300",
        ]),
        2
    );
}

#[test]
fn predict_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = make_phantom(tmp.path(), "truth", &tiny_spec(3));
    let ckpt = tmp.path().join("m.ckpt");
    ok(&[
        "train", "--data", s(&truth), "--out", s(&ckpt), "--epochs", "2", "--channels", "2", "--lr", "0.01",
    ]);
    let input = truth.join("phase_0.mhd");
    let trace = truth.join("trace.csv");

    let pred = tmp.path().join("pred");
    let summary = ok(&[
        "predict", "--model", s(&ckpt), "--input", s(&input), "--trace", s(&trace), "--out", s(&pred), "--apex",
        "3,3,1",
    ]);
    assert_eq!(summary["phases"].as_array().unwrap().len(), 2);

    // files round-trip exactly, so the report matches an in-process run
    let model = load_model::<f64>(&ckpt, None).unwrap();
    let seq = PhantomSequence::<f64>::read_dir(&truth).unwrap();
    let p = model.forward(&seq.phases[0], &seq.trace).unwrap();
    let direct = ssim_report(&seq.phases, &p.warped).unwrap();
    let report = tmp.path().join("report");
    ok(&[
        "evaluate", "--pred", s(&pred), "--truth", s(&truth), "--out", s(&report), "--masks", "--landmarks",
    ]);
    let from_files: SsimReport = serde_json::from_str(&fs::read_to_string(report.join("ssim.json")).unwrap()).unwrap();
    for (a, b) in direct.rows.iter().zip(&from_files.rows) {
        assert!((a.ssim_sim - b.ssim_sim).abs() < 1e-12);
        assert!((a.ssim_gnd - b.ssim_gnd).abs() < 1e-12);
        assert!(b.ssim_gnd < 1.0);
    }
    for f in ["ssim.csv", "dice.csv", "tre_1.csv", "tre_2.csv", "summary.json"] {
        assert!(report.join(f).exists(), "{f}");
    }

    let same = tmp.path().join("same");
    let s2 = ok(&[
        "evaluate", "--pred", s(&truth), "--truth", s(&truth), "--out", s(&same), "--masks", "--landmarks",
    ]);
    for row in s2["ssim"]["rows"].as_array().unwrap() {
        assert_eq!(row["ssim_sim"], 1.0);
    }
    assert_eq!(s2["dice"]["mean"], 1.0);
    assert_eq!(s2["tre"]["mean_mm"], 0.0);

    assert_eq!(
        code(&["predict", "--model", s(&tmp.path().join("none.ckpt")), "--input", s(&input), "--trace", s(&trace), "--out", s(&pred)]),
        3
    );
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let broken = tmp.path().join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    assert_eq!(
        code(&["predict", "--model", s(&broken), "--input", s(&input), "--trace", s(&trace), "--out", s(&pred)]),
        3
    );
}

#[test]
fn zero_scale_on_untrained_model_returns_input() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = make_phantom(tmp.path(), "truth", &tiny_spec(3));
    let ckpt = tmp.path().join("frozen.ckpt");
    ok(&["train", "--data", s(&truth), "--out", s(&ckpt), "--epochs", "1", "--channels", "2", "--lr", "0"]);
    let pred = tmp.path().join("pred");
    ok(&[
        "predict", "--model", s(&ckpt), "--input", s(&truth.join("phase_0.mhd")), "--trace",
        s(&truth.join("trace.csv")), "--out", s(&pred), "--trace-scale", "0",
    ]);
    let x0 = read_volume::<f64>(truth.join("phase_0.mhd")).unwrap();
    for t in 1..3 {
        assert_eq!(read_volume::<f64>(pred.join(format!("phase_{t}.mhd"))).unwrap(), x0);
    }
}

#[test]
fn augment_counts_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = make_phantom(tmp.path(), "truth", &tiny_spec(10));
    let ckpt = tmp.path().join("m.ckpt");
    ok(&["train", "--data", s(&truth), "--out", s(&ckpt), "--epochs", "1", "--channels", "2"]);
    let traces = tmp.path().join("traces");
    fs::create_dir(&traces).unwrap();
    let base = BreathingTrace::read_csv(truth.join("trace.csv")).unwrap();
    base.write_csv(traces.join("bt1.csv")).unwrap();
    base.rescale(2.0).unwrap().write_csv(traces.join("bt2.csv")).unwrap();

    let cases = |n: usize, name: &str| {
        let entries = (0..n)
            .map(|i| CaseEntry {
                id: format!("case{i:02}"),
                volume: "truth/phase_0.mhd".into(),
                mask: Some("truth/mask_0.mhd".into()),
                landmarks: Some("truth/landmarks_0.csv".into()),
            })
            .collect();
        let p = tmp.path().join(name);
        CasesManifest { cases: entries }.write(&p).unwrap();
        p
    };
    let twenty = cases(20, "twenty.json");
    let out = tmp.path().join("aug");
    let a = ok(&[
        "--seed", "7", "augment", "--model", s(&ckpt), "--cases", s(&twenty), "--traces", s(&traces), "--out", s(&out),
    ]);
    assert_eq!(a["total_pairs"], 200);
    assert_eq!(a["failures"], 0);
    let again = ok(&[
        "--seed", "7", "augment", "--model", s(&ckpt), "--cases", s(&twenty), "--traces", s(&traces), "--out", s(&out),
    ]);
    assert_eq!(a["manifest_sha256"], again["manifest_sha256"]);
    for i in 0..20 {
        rmsim::augment::verify_case(out.join(format!("case{i:02}"))).unwrap();
    }
    assert_eq!(
        sha256_file(out.join("case00/phase_0.mhd")).unwrap(),
        sha256_file(truth.join("phase_0.mhd")).unwrap()
    );

    let one = cases(1, "one.json");
    let b = ok(&[
        "augment", "--model", s(&ckpt), "--cases", s(&one), "--traces", s(&traces), "--out", s(&tmp.path().join("one")),
    ]);
    assert_eq!(b["total_pairs"], 10);
}

#[test]
fn trace_tools() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = make_phantom(tmp.path(), "truth", &PhantomSpec { phases: 6, ..PhantomSpec::default() });
    let extracted = tmp.path().join("extracted.csv");
    let summary = ok(&[
        "trace", "extract", "--dvfs", s(&truth), "--mask", s(&truth.join("mask_0.mhd")), "--out", s(&extracted),
    ]);
    let got = BreathingTrace::read_csv(&extracted).unwrap();
    let want = BreathingTrace::read_csv(truth.join("trace.csv")).unwrap();
    for (a, b) in got.samples().iter().zip(want.samples()) {
        assert!((a - b).abs() < 0.1, "{a} vs {b}");
    }
    assert_eq!(summary["apex_voxel"], serde_json::json!(PhantomSpec::default().apex_voxel().unwrap()));

    let same = tmp.path().join("same.csv");
    ok(&["trace", "rescale", "--input", s(&truth.join("trace.csv")), "--factor", "1", "--out", s(&same)]);
    assert_eq!(fs::read(&same).unwrap(), fs::read(truth.join("trace.csv")).unwrap());
    let five = tmp.path().join("five.csv");
    ok(&["trace", "rescale", "--input", s(&truth.join("trace.csv")), "--factor", "5", "--out", s(&five)]);
    let scaled = BreathingTrace::read_csv(&five).unwrap();
    for (a, b) in scaled.samples().iter().zip(want.samples()) {
        assert_eq!(*a, b * 5.0);
    }
}
