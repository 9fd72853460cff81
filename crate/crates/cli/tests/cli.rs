use std::path::{Path, PathBuf};
use std::process::Command;

use airwayseg::metrics::MetricKind;
use airwayseg::posthoc::FeatureTensor;
use airwayseg::volgrid::one_hot;
use airwayseg::volio::{
    read_probabilities, read_tensor, write_labels, write_pft_csv, write_probabilities, write_tensor, MetricCard,
    PftTable, XorShift64Star,
};
use airwayseg::{ClassTable, Dims, LabelVolume, ProbVolume, VoxelSpacing};
use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn airwayseg<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = Command::new(env!("CARGO_BIN_EXE_airwayseg"))
        .args(args)
        .env_remove("AIRWAYSEG_THREADS")
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const TUBES: &str = r#"[
    {"type": "tube", "class_id": 1, "start": [2, 3, 3], "end": [12, 3, 3], "radius": 1.5},
    {"type": "sphere", "class_id": 2, "center": [8, 10, 4], "radius": 2.5},
    {"type": "blob", "class_id": 3, "start": [14, 12, 4], "steps": 12, "radius": 1.2}
]"#;

fn spec(dir: &Path, name: &str, perturbation: &str, seed: u64) -> PathBuf {
    let p = dir.join(format!("{name}.json"));
    let text = format!(
        r#"{{"dims": [20, 16, 9], "spacing": [0.6, 0.6, 1.0], "primitives": {TUBES}, "perturbation": {perturbation}, "seed": {seed}}}"#
    );
    std::fs::write(&p, text).unwrap();
    p
}

fn phantoms(dir: &Path, perturbation: &str, count: usize) -> PathBuf {
    let cases = dir.join("cases");
    let sp = spec(dir, "ph", perturbation, 11);
    let r = airwayseg(["phantom", "--spec", s(&sp), "--out", s(&cases), "--count", &count.to_string()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    cases
}

const NOISY: &str = r#"{"shift": [1, 0, 0], "morph_steps": 0, "flip_probability": 0.02}"#;

#[test]
fn help_and_usage_errors() {
    assert_eq!(airwayseg(["--help"]).code, 0);
    assert_eq!(airwayseg(["--version"]).code, 0);
    assert_eq!(airwayseg(["evaluate"]).code, 1);
    assert_eq!(airwayseg(["no-such-command"]).code, 1);
    assert_eq!(airwayseg(["loss-check", "--random", "4x0x4x3"]).code, 1);
}

#[test]
fn evaluate_zero_perturbation_aggregate_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), "{}", 1);
    let out = dir.path().join("eval");
    let r = airwayseg(["evaluate", "--input-dir", s(&cases), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let agg = json(&out.join("aggregate.json"));
    assert_eq!(agg["kind"], "aggregate");
    for m in agg["report"]["metrics"].as_array().unwrap() {
        assert_eq!(m["avg"], 1.0, "{m}");
        // classes 4 and 5 are absent: only specificity is defined for them
        let per_class = m["per_class"].as_array().unwrap();
        assert!(per_class[..3].iter().all(|v| v == 1.0), "{m}");
        let absent_defined = m["metric"] == "specificity";
        assert!(per_class[3..].iter().all(|v| if absent_defined { v == 1.0 } else { v["reason"].is_string() }), "{m}");
    }
}

#[test]
fn evaluate_aggregate_equals_mean_of_cards() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), NOISY, 10);
    let cli = <airwayseg_cli::Cli as clap::Parser>::try_parse_from([
        "airwayseg",
        "evaluate",
        "--input-dir",
        s(&cases),
        "--out",
        "unused",
    ])
    .unwrap();
    let airwayseg_cli::Command::Evaluate(args) = cli.command else { unreachable!() };
    let run = airwayseg_cli::commands::evaluate::evaluate_cases(&args).unwrap();
    let agg = run.aggregate.unwrap();
    assert_eq!(agg.case_count, 10);

    let cards: Vec<MetricCard> = run
        .reports
        .iter()
        .map(|r| MetricCard::read(cases.join(format!("{}_card.json", r.case_id))).unwrap())
        .collect();
    for kind in MetricKind::ALL {
        let summary = agg.metric(kind);
        for (c, got) in summary.per_class.iter().enumerate() {
            let vals: Vec<f64> = cards.iter().filter_map(|k| k.rows[c].get(kind).value()).collect();
            match got.value() {
                Some(v) => assert!((v - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12),
                None => assert!(vals.is_empty(), "{kind:?} class {c}"),
            }
        }
    }
}

#[test]
fn missing_prediction_is_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), NOISY, 10);
    std::fs::remove_file(cases.join("ph_004_pred.mhd")).unwrap();
    let out = dir.path().join("eval");
    let r = airwayseg(["evaluate", "--input-dir", s(&cases), "--out", s(&out), "--format", "csv"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("ph_004"), "{}", r.stderr);
    let text = std::fs::read_to_string(out.join("cases.csv")).unwrap();
    assert!(text.contains("# failed_cases=ph_004"));
    let ids: std::collections::BTreeSet<&str> = text
        .lines()
        .filter(|l| l.starts_with("ph_"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ids.len(), 9);
    assert!(!ids.contains("ph_004"));
}

#[test]
fn evaluate_without_pairs_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = airwayseg(["evaluate", "--input-dir", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("no matched"));
}

#[test]
fn evaluate_records_flags_in_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), NOISY, 2);
    let out = dir.path().join("eval");
    let r = airwayseg([
        "evaluate",
        "--input-dir",
        s(&cases),
        "--out",
        s(&out),
        "--tolerance-px",
        "3",
        "--no-auc",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = json(&out.join("cases.json"));
    assert_eq!(rep["metadata"]["tolerance_px"], "3");
    assert_eq!(rep["metadata"]["compute_auc"], "false");
    // 3 px of 0.6 mm
    assert!((rep["report"][0]["tolerance_mm"].as_f64().unwrap() - 1.8).abs() < 1e-12);
    assert_eq!(rep["report"][0]["rows"][0]["auc"]["reason"], "auc_disabled");
}

fn pft(dir: &Path, rows: &[(&str, f64)]) -> PathBuf {
    let p = dir.join("pft.csv");
    let t = PftTable::new(rows.iter().map(|(a, b)| (a.to_string(), *b))).unwrap();
    write_pft_csv(&t, &p).unwrap();
    p
}

#[test]
fn correlate_constant_class_gives_undefined_row() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), "{}", 4);
    let p = pft(dir.path(), &[("ph_000", 80.0), ("ph_001", 70.0), ("ph_002", 60.0), ("ph_003", 50.0)]);
    let out = dir.path().join("corr.csv");
    let r = airwayseg(["correlate", "--input-dir", s(&cases), "--pft", s(&p), "--out", s(&out), "--format", "csv"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = std::fs::read_to_string(&out).unwrap();
    // only the blob (class 3) depends on the per-case seed; other volumes are constant
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.contains("null:"), i != 2, "{text}");
    }
}

#[test]
fn correlate_id_mismatch_and_small_n_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), "{}", 3);
    let out = dir.path().join("corr.json");
    let p = pft(dir.path(), &[("ph_000", 80.0), ("ph_001", 70.0), ("other", 60.0)]);
    let r = airwayseg(["correlate", "--input-dir", s(&cases), "--pft", s(&p), "--out", s(&out)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("ph_002") && r.stderr.contains("other"), "{}", r.stderr);
    assert!(!out.exists());

    std::fs::remove_file(cases.join("ph_002_pred.mhd")).unwrap();
    let p = pft(dir.path(), &[("ph_000", 80.0), ("ph_001", 70.0)]);
    let r = airwayseg(["correlate", "--input-dir", s(&cases), "--pft", s(&p), "--out", s(&out)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("at least 3"), "{}", r.stderr);
}

#[test]
fn loss_check_random_grid_passes() {
    let r = airwayseg(["loss-check", "--random", "4x4x4x3", "--seed", "7", "--h", "1e-5"]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert_eq!(r.stdout.matches("Pass").count(), 9, "{}", r.stdout);
}

#[test]
fn loss_check_on_one_hot_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(5, 4, 3);
    let data = (0..dims.len()).map(|i| (i % 7 % 3) as u8).collect();
    let labels = LabelVolume::new(dims, VoxelSpacing::isotropic_mm(), data, ClassTable::numbered(2).unwrap()).unwrap();
    let y = dir.path().join("y.mhd");
    write_labels(&labels, &y).unwrap();
    let p = dir.path().join("p.mhd");
    write_probabilities(&one_hot::<f64>(&labels), &p).unwrap();
    let out = dir.path().join("lc.json");
    let r = airwayseg(["loss-check", "--y", s(&y), "--p", s(&p), "--alpha", "0,0.5,1", "--out", s(&out)]);
    assert!(r.code == 0 || r.code == 2, "{}", r.stderr);
    let rep = json(&out);
    let value = |name: &str| {
        rep["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|row| row["loss"] == name)
            .unwrap()["value"]
            .as_f64()
            .unwrap()
    };
    assert!(value("CE") < 2e-7);
    assert!((value("SoftDice") - 1.0).abs() < 1e-12);
    assert!(value("DiceCE") < 2e-7);
    assert!(value("WDiceTop50(alpha=0)") < 1e-12);
    assert!(rep["alpha_linearity_deviation"].as_f64().unwrap() < 1e-12);
}

fn random_members(dir: &Path, k: usize, jitter: f64) -> (Vec<PathBuf>, Vec<ProbVolume<f64>>) {
    let dims = Dims::new(5, 4, 3);
    let sp = VoxelSpacing::new(0.6, 0.6, 1.0).unwrap();
    let c = 3;
    let n = dims.len();
    let mut rng = XorShift64Star::new(99);
    let base: Vec<f64> = (0..n * c).map(|_| rng.next_f64()).collect();
    let mut paths = Vec::new();
    let mut vols = Vec::new();
    for m in 0..k {
        let mut data: Vec<f64> = base.iter().map(|b| b + jitter * rng.next_f64()).collect();
        for i in 0..n {
            let s: f64 = (0..c).map(|ch| data[ch * n + i]).sum();
            for ch in 0..c {
                data[ch * n + i] /= s;
            }
        }
        let v = ProbVolume::new(dims, sp, c, data, true).unwrap();
        let p = dir.join(format!("m{m}.mhd"));
        write_probabilities(&v, &p).unwrap();
        paths.push(p);
        vols.push(v);
    }
    (paths, vols)
}

fn uncertainty(dir: &Path, members: &[PathBuf]) -> (Run, PathBuf, PathBuf) {
    let vol = dir.join("var.mhd");
    let rep = dir.join("var.json");
    let mut args: Vec<String> = vec!["uncertainty".into(), "--members".into()];
    args.extend(members.iter().map(|p| s(p).to_string()));
    args.extend(["--out-volume".into(), s(&vol).into(), "--out".into(), s(&rep).into()]);
    (airwayseg(args), vol, rep)
}

#[test]
fn uncertainty_matches_direct_formula() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, vols) = random_members(dir.path(), 5, 0.05);
    let (r, vol, _) = uncertainty(dir.path(), &paths);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let var = read_probabilities(&vol).unwrap();
    for (j, &got) in var.data().iter().enumerate() {
        let xs: Vec<f64> = vols.iter().map(|v| v.data()[j]).collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let want = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 5.0;
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

#[test]
fn uncertainty_identical_members_and_bad_ensembles() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, _) = random_members(dir.path(), 3, 0.0);
    let (r, _, rep) = uncertainty(dir.path(), &paths);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = json(&rep);
    assert_eq!(report["report"]["global_mean"], 0.0);

    let (r, _, _) = uncertainty(dir.path(), &paths[..1]);
    assert_eq!(r.code, 1);

    let other = dir.path().join("other.mhd");
    let dims = Dims::new(2, 2, 2);
    let v = ProbVolume::new(dims, VoxelSpacing::isotropic_mm(), 2, vec![0.5; 16], true).unwrap();
    write_probabilities(&v, &other).unwrap();
    let (r, _, _) = uncertainty(dir.path(), &[paths[0].clone(), other]);
    assert_eq!(r.code, 1);
}

fn tensor(dir: &Path, name: &str, channels: usize, spatial: &[usize], f: impl Fn(usize) -> f64) -> PathBuf {
    let n: usize = spatial.iter().product();
    let t = FeatureTensor::unit_spacing(channels, spatial.to_vec(), (0..channels * n).map(f).collect()).unwrap();
    let p = dir.join(format!("{name}.mhd"));
    write_tensor(&t, &p).unwrap();
    p
}

#[test]
fn gradcam_examples() {
    let dir = tempfile::tempdir().unwrap();
    let spatial = [4, 3, 2];
    let act = tensor(dir.path(), "act", 1, &spatial, |i| (i % 7) as f64 * 0.5);
    let zero = tensor(dir.path(), "zero", 1, &spatial, |_| 0.0);
    let pos = tensor(dir.path(), "pos", 1, &spatial, |_| 0.3);
    let out = dir.path().join("h.mhd");

    let r = airwayseg(["gradcam", "--activations", s(&act), "--gradients", s(&zero), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("zero_map=true"));
    assert!(read_tensor(&out).unwrap().data().iter().all(|&v| v == 0.0));

    let r = airwayseg(["gradcam", "--activations", s(&act), "--gradients", s(&pos), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let h = read_tensor(&out).unwrap();
    let a = read_tensor(&act).unwrap();
    let amax = a.data().iter().cloned().fold(0.0, f64::max);
    for (x, y) in h.data().iter().zip(a.data()) {
        assert!((x - y / amax).abs() < 1e-15);
    }

    let r = airwayseg([
        "gradcam",
        "--activations",
        s(&act),
        "--gradients",
        s(&pos),
        "--target-dims",
        "8x6x4",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let h = read_tensor(&out).unwrap();
    assert_eq!(h.spatial(), &[8, 6, 4]);
    assert_eq!(h.data().iter().cloned().fold(0.0, f64::max), 1.0);

    let two = tensor(dir.path(), "two", 2, &spatial, |_| 1.0);
    let r = airwayseg(["gradcam", "--activations", s(&act), "--gradients", s(&two), "--out", s(&out)]);
    assert_eq!(r.code, 1);
}

#[test]
fn phantom_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sp = spec(dir.path(), "ph", NOISY, 5);
    for out in ["a", "b"] {
        let r = airwayseg(["phantom", "--spec", s(&sp), "--out", s(&dir.path().join(out))]);
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    for f in ["ph_gt.raw", "ph_pred.raw", "ph_prob.raw", "ph_gt.mhd", "ph_card.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn phantom_zero_perturbation_card_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), "{}", 1);
    let card = MetricCard::read(cases.join("ph_card.json")).unwrap();
    for row in card.rows.iter().filter(|r| r.gt_voxels > 0) {
        for k in MetricKind::ALL {
            assert_eq!(row.get(k).value(), Some(1.0), "{k:?}");
        }
    }

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"dims": [8, 8, 8], "spacing": [1, 1, 1], "primitives": [{"type": "sphere", "class_id": 1, "center": [1, 4, 4], "radius": 3}], "seed": 1}"#,
    )
    .unwrap();
    let r = airwayseg(["phantom", "--spec", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("out of bounds"), "{}", r.stderr);

    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(airwayseg(["phantom", "--spec", s(&bad), "--out", s(&dir.path().join("x"))]).code, 1);
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), NOISY, 3);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let st = Command::new(env!("CARGO_BIN_EXE_airwayseg"))
            .args(["evaluate", "--input-dir", s(&cases), "--out", s(&out)])
            .env("AIRWAYSEG_THREADS", threads)
            .status()
            .unwrap();
        assert!(st.success());
        outputs.push(std::fs::read(out.join("cases.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let r = Command::new(env!("CARGO_BIN_EXE_airwayseg"))
        .args(["evaluate", "--input-dir", s(&cases), "--out", s(&dir.path().join("z"))])
        .env("AIRWAYSEG_THREADS", "0")
        .status()
        .unwrap();
    assert_eq!(r.code(), Some(1));
}

#[test]
fn manifest_input() {
    let dir = tempfile::tempdir().unwrap();
    let cases = phantoms(dir.path(), NOISY, 2);
    let manifest = dir.path().join("m.json");
    std::fs::write(
        &manifest,
        r#"{"cases": [{"case_id": "only", "gt": "cases/ph_001_gt.mhd", "pred": "cases/ph_001_pred.mhd"}]}"#,
    )
    .unwrap();
    let out = dir.path().join("eval");
    let r = airwayseg(["evaluate", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = json(&out.join("cases.json"));
    assert_eq!(rep["report"].as_array().unwrap().len(), 1);
    assert_eq!(rep["report"][0]["case_id"], "only");
    let _ = cases;
}
