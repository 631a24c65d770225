use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use probemb::triplet_lab::SWEEP_CSV_HEADER;
use probemb::{load_checkpoint, RetrievalReport};

const SPEC: &str =
    r#"{"train_images": 60, "val_images": 20, "test_images": 20, "region_images": 40, "feature_dim": 12}"#;

fn probemb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probemb"))
        .args(args)
        .env_remove("PROBEMB_THREADS")
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn ok(args: &[&str]) -> String {
    let out = probemb(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn generated() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("spec.json"), SPEC).unwrap();
        ok(&[
            "gen",
            "--spec",
            &s(&root.join("spec.json")),
            "--out",
            &s(&root.join("data")),
        ]);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        s(&self.path(rel))
    }

    fn trained(&self) -> String {
        let out = self.arg("model.pemb");
        ok(&[
            "train",
            "--dim",
            "8",
            "--epochs",
            "2",
            "--train",
            &self.arg("data/train"),
            "--val",
            &self.arg("data/val"),
            "--out",
            &out,
        ]);
        out
    }
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(probemb(&["--help"]).status.code(), Some(0));
    assert_eq!(probemb(&["--version"]).status.code(), Some(0));
    assert_eq!(probemb(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(probemb(&["eval", "--checkpoint"]).status.code(), Some(1));
    assert_eq!(
        probemb(&["eval", "--checkpoint", "m", "--data", "d", "--protocol", "10k"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_probemb"))
        .args(["gen", "--out", "/nonexistent/never"])
        .env("PROBEMB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PROBEMB_THREADS"));
}

#[test]
fn bad_config_files_are_usage_errors() {
    let ws = Workspace::generated();
    let config = ws.path("config.json");
    fs::write(&config, r#"{"margin": 0.2, "learning_rte": 0.1}"#).unwrap();
    let args = |c: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            c.to_string(),
            "--train".into(),
            ws.arg("data/train"),
            "--val".into(),
            ws.arg("data/val"),
            "--out".into(),
            ws.arg("m.pemb"),
        ]
    };
    let run = |a: Vec<String>| probemb(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(run(args(&s(&config))).status.code(), Some(1));

    let mut with_metric = args(&s(&config));
    with_metric.extend(["--metric".into(), "neg_min_kl".into()]);
    assert_eq!(run(with_metric).status.code(), Some(1));

    let out = probemb(&["gen", "--spec", &s(&config), "--out", &ws.arg("other")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!ws.path("m.pemb").exists());
}

#[test]
fn missing_and_corrupt_data_exit_2() {
    let ws = Workspace::generated();
    let model = ws.trained();
    let out = probemb(&["eval", "--checkpoint", &model, "--data", &ws.arg("nowhere")]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(ws.path("data/test/annotations.jsonl"), "{\"caption\": 0}\n").unwrap();
    let report = ws.arg("report.json");
    let out = probemb(&[
        "eval",
        "--checkpoint",
        &model,
        "--data",
        &ws.arg("data/test"),
        "--out",
        &report,
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("annotations.jsonl:1"), "{stderr}");
    assert!(!ws.path("report.json").exists());

    let bytes = fs::read(&model).unwrap();
    fs::write(&model, &bytes[..bytes.len() - 3]).unwrap();
    let out = probemb(&["eval", "--checkpoint", &model, "--data", &ws.arg("data/val")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let ws = Workspace::generated();
    for split in ["train", "val", "test"] {
        for file in [
            "images.pemb",
            "captions.pemb",
            "annotations.jsonl",
            "ambiguity.csv",
        ] {
            assert!(
                ws.path(&format!("data/{split}/{file}")).exists(),
                "{split}/{file}"
            );
        }
    }
    let model = ws.arg("model.pemb");
    ok(&[
        "train",
        "--metric",
        "neg_kl_image_to_caption",
        "--shape",
        "spherical_avg_pool",
        "--dim",
        "8",
        "--epochs",
        "2",
        "--train",
        &ws.arg("data/train"),
        "--val",
        &ws.arg("data/val"),
        "--out",
        &model,
        "--history",
        &ws.arg("history.json"),
    ]);
    let loaded = load_checkpoint(Path::new(&model)).unwrap();
    assert_eq!(loaded.joint_dim, 8);
    let history: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("history.json")).unwrap()).unwrap();
    assert_eq!(history["epoch_loss"].as_array().unwrap().len(), 2);

    let table = ok(&[
        "eval",
        "--checkpoint",
        &model,
        "--data",
        &ws.arg("data/test"),
        "--pmrp",
        "--rpc2",
        "--out",
        &ws.arg("report.json"),
        "--csv",
        &ws.arg("report.csv"),
    ]);
    assert!(table.contains("rsum"));
    let report: RetrievalReport =
        serde_json::from_str(&fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert!(report.image_to_text.pmrp.is_some() && report.text_to_image.rpc2.is_some());
    let csv = fs::read_to_string(ws.path("report.csv")).unwrap();
    assert!(csv.starts_with(RetrievalReport::CSV_HEADER));

    ok(&[
        "uncertainty",
        "--checkpoint",
        &model,
        "--data",
        &ws.arg("data/test"),
        "--out",
        &ws.arg("unc.csv"),
    ]);
    let unc = fs::read_to_string(ws.path("unc.csv")).unwrap();
    // 20 images and 100 captions plus the header.
    assert_eq!(unc.lines().count(), 121);

    ok(&[
        "triplets",
        "--regions",
        &ws.arg("data/regions.jsonl"),
        "--composer",
        &ws.arg("data/composer.json"),
        "--count",
        "25",
        "--out",
        &ws.arg("triplets.jsonl"),
    ]);
    assert_eq!(
        fs::read_to_string(ws.path("triplets.jsonl"))
            .unwrap()
            .lines()
            .count(),
        25
    );
    let shown = ok(&[
        "select",
        "--checkpoint",
        &model,
        "--manifest",
        &ws.arg("triplets.jsonl"),
        "--out",
        &ws.arg("select.csv"),
    ]);
    assert!(shown.contains("25 triplets"));

    ok(&[
        "sweep",
        "--checkpoint",
        &model,
        "--regions",
        &ws.arg("data/regions.jsonl"),
        "--composer",
        &ws.arg("data/composer.json"),
        "--samples",
        "20",
        "--out",
        &ws.arg("sweep.csv"),
    ]);
    let sweep = fs::read_to_string(ws.path("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some(SWEEP_CSV_HEADER));
    assert_eq!(sweep.lines().count(), 6);
}

#[test]
fn triplets_without_features_still_write_a_manifest() {
    let ws = Workspace::generated();
    ok(&[
        "triplets",
        "--regions",
        &ws.arg("data/regions.jsonl"),
        "--count",
        "5",
        "--out",
        &ws.arg("t.jsonl"),
    ]);
    let first: serde_json::Value = serde_json::from_str(
        fs::read_to_string(ws.path("t.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert!(first["caption_c"].as_str().unwrap().contains(" and "));
}

#[test]
fn ablation_covers_the_grid() {
    let ws = Workspace::generated();
    ok(&[
        "ablate",
        "--dim",
        "6",
        "--epochs",
        "1",
        "--train",
        &ws.arg("data/train"),
        "--val",
        &ws.arg("data/val"),
        "--out",
        &ws.arg("ablate.csv"),
        "--best",
        &ws.arg("best.pemb"),
    ]);
    let csv = fs::read_to_string(ws.path("ablate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",1")).count(), 1);
    let mut pairs: Vec<(&str, &str)> = rows
        .iter()
        .map(|r| {
            let mut f = r.split(',');
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    assert_eq!(pairs.len(), 12);
    load_checkpoint(&ws.path("best.pemb")).unwrap();
}

#[test]
fn generation_is_seeded() {
    let ws = Workspace::generated();
    ok(&["gen", "--spec", &ws.arg("spec.json"), "--out", &ws.arg("again")]);
    ok(&[
        "gen",
        "--spec",
        &ws.arg("spec.json"),
        "--out",
        &ws.arg("other"),
        "--seed",
        "5",
    ]);
    let read = |p: &str| fs::read(ws.path(p)).unwrap();
    assert_eq!(read("data/train/images.pemb"), read("again/train/images.pemb"));
    assert_eq!(read("data/regions.jsonl"), read("again/regions.jsonl"));
    assert_ne!(read("data/train/images.pemb"), read("other/train/images.pemb"));
}

#[test]
fn eval_on_exact_matches_is_perfect() {
    use probemb::{
        save_checkpoint, CovarianceShape, FeatureDataset, MatchAnnotations, ModelConfig, ProbModel,
        SimilarityMetric, Split,
    };

    let dir = tempfile::tempdir().unwrap();
    let dim = 6;
    let n_images = 12;
    let image_features: Vec<Vec<f64>> = (0..n_images)
        .map(|j| {
            (0..dim)
                .map(|d| ((j + 1) * (d + 1)) as f64 / 10.0 - d as f64)
                .collect()
        })
        .collect();
    // Three identical captions per image.
    let caption_features: Vec<Vec<f64>> = image_features
        .iter()
        .flat_map(|f| std::iter::repeat_n(f.clone(), 3))
        .collect();
    let annotations = MatchAnnotations {
        base_matches: (0..3 * n_images).map(|k| (k, k / 3)).collect(),
        ..Default::default()
    };
    let data = FeatureDataset {
        image_features,
        caption_features,
        annotations,
        split: Split::Test,
    };
    data.save(&dir.path().join("test")).unwrap();

    let mut model = ProbModel::zeros(&ModelConfig {
        image_dim: dim,
        caption_dim: dim,
        joint_dim: dim,
        shape: CovarianceShape::Ellipsoidal,
        metric: SimilarityMetric::NegWasserstein2,
        frozen_unit_variance: false,
    })
    .unwrap();
    for d in 0..dim {
        model.image_mean_head.weight[d * dim + d] = 1.0;
        model.caption_mean_head.weight[d * dim + d] = 1.0;
    }
    let checkpoint = dir.path().join("identity.pemb");
    save_checkpoint(&checkpoint, &model).unwrap();

    let report_path = dir.path().join("report.json");
    ok(&[
        "eval",
        "--checkpoint",
        &s(&checkpoint),
        "--data",
        &s(&dir.path().join("test")),
        "--out",
        &s(&report_path),
    ]);
    let report: RetrievalReport = serde_json::from_str(&fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(report.image_to_text.r1, 100.0);
    assert_eq!(report.text_to_image.r1, 100.0);
    assert_eq!(report.rsum, 600.0);
}
