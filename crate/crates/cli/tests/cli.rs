use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use occnet_cli::io::{model_to_json, read_model};
use tempfile::TempDir;

fn occnet(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_occnet"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn ok(args: &[&str]) {
    let (code, stderr) = occnet(args);
    assert_eq!(code, 0, "occnet {args:?} failed: {stderr}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn zero_model() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("models/zero.json")
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

/// Small simulated scenario under `dir/data`.
fn simulate_small(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "simulate",
        "--sites",
        "60",
        "--visits",
        "3",
        "--rho",
        "0.5",
        "--seed",
        seed,
        "--out",
        p(&data),
    ]);
    data
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_expected_row_counts() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    ok(&[
        "simulate",
        "--sites",
        "100",
        "--visits",
        "3",
        "--rho",
        "0",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(line_count(&out.join("train/sites.csv")), 101);
    assert_eq!(line_count(&out.join("val/sites.csv")), 101);
    assert_eq!(line_count(&out.join("train/surveys.csv")), 301);
    assert_eq!(line_count(&out.join("train/truth_site.csv")), 101);
    assert_eq!(line_count(&out.join("train/truth_survey.csv")), 301);
    assert_eq!(line_count(&out.join("test/sites.csv")), 1001);
    let header = fs::read_to_string(out.join("train/sites.csv")).unwrap();
    assert!(header.starts_with("site_id,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10\n"));
}

#[test]
fn test_split_size_is_fixed() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    ok(&[
        "simulate",
        "--sites",
        "7",
        "--visits",
        "2",
        "--seed",
        "3",
        "--out",
        p(&out),
    ]);
    assert_eq!(line_count(&out.join("train/sites.csv")), 8);
    assert_eq!(line_count(&out.join("test/sites.csv")), 1001);
}

#[test]
fn simulate_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "simulate",
            "--sites",
            "50",
            "--visits",
            "4",
            "--rho",
            "1",
            "--seed",
            "9",
            "--out",
            p(out),
        ]);
    }
    for split in ["train", "val", "test"] {
        for file in [
            "sites.csv",
            "surveys.csv",
            "truth_site.csv",
            "truth_survey.csv",
        ] {
            let rel = Path::new(split).join(file);
            assert_eq!(
                fs::read(a.join(&rel)).unwrap(),
                fs::read(b.join(&rel)).unwrap(),
                "{rel:?}"
            );
        }
    }
}

#[test]
fn odlr_model_type_is_an_alias() {
    let dir = TempDir::new().unwrap();
    let data = simulate_small(dir.path(), "2");
    let (train, val) = (data.join("train"), data.join("val"));
    let common = [
        "--train",
        p(&train),
        "--val",
        p(&val),
        "--epochs",
        "30",
        "--lr",
        "0.01",
        "--seed",
        "4",
    ];
    let alias = dir.path().join("alias");
    let explicit = dir.path().join("explicit");
    ok(&[
        &["train"],
        &common[..],
        &["--model-type", "odlr", "--out", p(&alias)],
    ]
    .concat());
    ok(&[
        &["train"],
        &common[..],
        &["--depth", "1", "--lambda", "0", "--out", p(&explicit)],
    ]
    .concat());
    for file in ["model.json", "history.csv"] {
        assert_eq!(
            fs::read(alias.join(file)).unwrap(),
            fs::read(explicit.join(file)).unwrap()
        );
    }
    assert_eq!(line_count(&alias.join("history.csv")), 31);
}

#[test]
fn tune_default_grid_has_108_rows() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "simulate",
        "--sites",
        "40",
        "--visits",
        "2",
        "--seed",
        "5",
        "--out",
        p(&data),
    ]);
    let out = dir.path().join("tune");
    ok(&[
        "tune",
        "--train",
        p(&data.join("train")),
        "--val",
        p(&data.join("val")),
        "--epochs",
        "2",
        "--out",
        p(&out),
    ]);
    let configs = fs::read_to_string(out.join("configs.csv")).unwrap();
    let rows: Vec<&str> = configs.lines().skip(1).collect();
    assert_eq!(rows.len(), 108);
    assert!(configs.starts_with("rank,grid_index,"));
    // Ranked by validation score, best first.
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').nth(8).unwrap().parse().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(out.join("model.json").exists() && out.join("history.csv").exists());
    assert_eq!(line_count(&out.join("history.csv")), 3);
}

#[test]
fn tune_odlr_varies_learning_rate_and_batch_only() {
    let dir = TempDir::new().unwrap();
    let data = simulate_small(dir.path(), "6");
    let out = dir.path().join("tune");
    ok(&[
        "tune",
        "--model-type",
        "odlr",
        "--train",
        p(&data.join("train")),
        "--val",
        p(&data.join("val")),
        "--epochs",
        "3",
        "--out",
        p(&out),
    ]);
    let configs = fs::read_to_string(out.join("configs.csv")).unwrap();
    assert_eq!(configs.lines().count(), 7);
    assert!(read_json(&out.join("model.json"))["depth"] == 1);
}

#[test]
fn model_json_round_trips_byte_identically() {
    let dir = TempDir::new().unwrap();
    let data = simulate_small(dir.path(), "7");
    let out = dir.path().join("m");
    ok(&[
        "train",
        "--train",
        p(&data.join("train")),
        "--val",
        p(&data.join("val")),
        "--epochs",
        "5",
        "--width",
        "6",
        "--out",
        p(&out),
    ]);
    for path in [out.join("model.json"), zero_model()] {
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(model_to_json(&read_model(&path).unwrap()), text);
    }
    let json = read_json(&out.join("model.json"));
    assert_eq!(
        (json["j"].as_u64(), json["k"].as_u64()),
        (Some(10), Some(10))
    );
    assert_eq!(json["occ_layers"].as_array().unwrap().len(), 3);
}

#[test]
fn zero_model_scores_at_chance() {
    let dir = TempDir::new().unwrap();
    let data = simulate_small(dir.path(), "8");
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--model",
        p(&zero_model()),
        "--data",
        p(&data.join("test")),
        "--out",
        p(&out),
    ]);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["auroc"].as_f64(), Some(0.5));
    // Constant predictions have no correlation with the truth.
    assert!(report["occ_prob_corr"].is_null());
    for name in ["histogram_pos.csv", "histogram_neg.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        for (o, line) in text.lines().skip(1).enumerate() {
            for (d, count) in line.split(',').skip(1).enumerate() {
                let count: u64 = count.parse().unwrap();
                assert_eq!(count > 0, o == 5 && d == 5, "{name} cell ({o}, {d})");
            }
        }
    }
}

#[test]
fn evaluate_without_truth_reports_null_correlations() {
    let dir = TempDir::new().unwrap();
    let data = simulate_small(dir.path(), "10");
    let bare = dir.path().join("bare");
    fs::create_dir(&bare).unwrap();
    for file in ["sites.csv", "surveys.csv"] {
        fs::copy(data.join("test").join(file), bare.join(file)).unwrap();
    }
    let model = dir.path().join("m");
    ok(&[
        "train",
        "--model-type",
        "odlr",
        "--train",
        p(&data.join("train")),
        "--val",
        p(&data.join("val")),
        "--epochs",
        "20",
        "--lr",
        "0.01",
        "--out",
        p(&model),
    ]);
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--model",
        p(&model.join("model.json")),
        "--data",
        p(&bare),
        "--out",
        p(&out),
    ]);
    let report = read_json(&out.join("report.json"));
    assert!(report["occ_prob_corr"].is_null());
    assert!(report["det_prob_corr"].is_null());
    let auroc = report["auroc"].as_f64().unwrap();
    let auprc = report["auprc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc) && (0.0..=1.0).contains(&auprc));
    assert_eq!(report["occ_importance"].as_array().unwrap().len(), 10);
    let importance = fs::read_to_string(out.join("importance.csv")).unwrap();
    assert_eq!(importance.lines().count(), 21);
    assert!(importance.starts_with("block,feature,importance\nsite,x1,"));

    let with_truth = dir.path().join("eval_truth");
    ok(&[
        "evaluate",
        "--model",
        p(&model.join("model.json")),
        "--data",
        p(&data.join("test")),
        "--out",
        p(&with_truth),
    ]);
    let report = read_json(&with_truth.join("report.json"));
    assert!(report["occ_prob_corr"].as_f64().is_some());
    assert!(report["det_prob_corr"].as_f64().is_some());
}

#[test]
fn normalization_is_saved_and_reapplied() {
    let dir = TempDir::new().unwrap();
    let data = simulate_small(dir.path(), "11");
    let model = dir.path().join("m");
    ok(&[
        "train",
        "--normalize",
        "--train",
        p(&data.join("train")),
        "--val",
        p(&data.join("val")),
        "--epochs",
        "5",
        "--out",
        p(&model),
    ]);
    let norm = read_json(&model.join("normalization.json"));
    assert_eq!(norm["site_mean"].as_array().unwrap().len(), 10);
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--model",
        p(&model.join("model.json")),
        "--normalization",
        p(&model.join("normalization.json")),
        "--data",
        p(&data.join("test")),
        "--out",
        p(&out),
    ]);
    assert!(out.join("report.json").exists());
}

fn write_tiny(dir: &Path, surveys: &str) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("sites.csv"), "site_id,x1\na,0.5\nb,-1\nc,2\n").unwrap();
    fs::write(dir.join("surveys.csv"), surveys).unwrap();
}

fn tiny_model(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, "{\"j\":1,\"k\":2,\"depth\":1,\"width\":0,\"occ_layers\":[[[0.0]]],\"det_layers\":[[[0.0,0.0]]]}\n")
        .unwrap();
    path
}

#[test]
fn min_visits_drops_sparse_sites() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    write_tiny(
        &data,
        "site_id,visit,w1,w2,y\na,1,0,0,1\nb,1,0,0,0\nb,2,1,1,1\nc,1,0,0,0\nc,2,0,0,0\nc,3,1,0,1\n",
    );
    let model = tiny_model(dir.path());
    let total = |out: &Path| -> u64 {
        ["histogram_pos.csv", "histogram_neg.csv"]
            .iter()
            .flat_map(|f| {
                fs::read_to_string(out.join(f))
                    .unwrap()
                    .lines()
                    .skip(1)
                    .flat_map(|l| {
                        l.split(',')
                            .skip(1)
                            .map(|c| c.parse::<u64>().unwrap())
                            .collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>()
            })
            .sum()
    };
    for (min, surveys) in [("1", 6), ("2", 5), ("3", 3)] {
        let out = dir.path().join(format!("eval{min}"));
        ok(&[
            "evaluate",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--min-visits",
            min,
            "--out",
            p(&out),
        ]);
        assert_eq!(total(&out), surveys);
    }
}

#[test]
fn parse_errors_name_file_line_and_column() {
    let dir = TempDir::new().unwrap();
    let model = tiny_model(dir.path());
    let cases = [
        (
            "site_id,visit,w1,w2,y\na,1,0,0,1\nb,1,0,oops,0\n",
            "surveys.csv:3:4",
        ),
        (
            "site_id,visit,w1,w2,y\na,1,0,0,1\nb,1,0,0,2\n",
            "surveys.csv:3:5",
        ),
        (
            "site_id,visit,w1,w2,y\na,1,0,0,1\na,3,0,0,0\n",
            "surveys.csv:3:2",
        ),
        (
            "site_id,visit,w1,w2,y\na,1,0,0,1\nb,1,0,0,0\na,2,0,0,0\n",
            "surveys.csv:4:1",
        ),
        ("site_id,visit,w1,w2,y\nzz,1,0,0,1\n", "surveys.csv:2:1"),
        ("site_id,visit,w1,w2,y\na,1,0,0\n", "surveys.csv:2:"),
    ];
    for (i, (surveys, location)) in cases.iter().enumerate() {
        let data = dir.path().join(format!("data{i}"));
        write_tiny(&data, surveys);
        let out = dir.path().join("out");
        let (code, stderr) = occnet(&[
            "evaluate",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--out",
            p(&out),
        ]);
        assert_eq!(code, 2, "{stderr}");
        assert!(
            stderr.contains(location),
            "expected {location} in: {stderr}"
        );
    }
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    // Usage errors.
    assert_eq!(occnet(&["simulate", "--rho", "2", "--out", p(&out)]).0, 1);
    assert_eq!(occnet(&["train", "--nonsense"]).0, 1);
    assert_eq!(
        occnet(&[
            "evaluate",
            "--model",
            "m",
            "--data",
            "d",
            "--bins",
            "1",
            "--out",
            p(&out)
        ])
        .0,
        1
    );
    assert_eq!(occnet(&["--help"]).0, 0);
    assert_eq!(occnet(&["--version"]).0, 0);

    // Data errors: missing files and a model/data dimension mismatch.
    let data = dir.path().join("data");
    ok(&[
        "simulate",
        "--sites",
        "10",
        "--visits",
        "2",
        "--site-features",
        "6",
        "--survey-features",
        "6",
        "--out",
        p(&data),
    ]);
    assert_eq!(
        occnet(&[
            "evaluate",
            "--model",
            "missing.json",
            "--data",
            p(&data.join("test")),
            "--out",
            p(&out)
        ])
        .0,
        2
    );
    let (code, stderr) = occnet(&[
        "evaluate",
        "--model",
        p(&zero_model()),
        "--data",
        p(&data.join("test")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("schema"), "{stderr}");

    // Train and validation sets with different dimensions.
    let other = dir.path().join("other");
    ok(&[
        "simulate",
        "--sites",
        "10",
        "--visits",
        "2",
        "--out",
        p(&other),
    ]);
    let (code, _) = occnet(&[
        "train",
        "--train",
        p(&data.join("train")),
        "--val",
        p(&other.join("val")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 2);

    // Numeric failure: a learning rate large enough to diverge.
    let (code, stderr) = occnet(&[
        "train",
        "--train",
        p(&data.join("train")),
        "--val",
        p(&data.join("val")),
        "--optimizer",
        "sgd",
        "--lr",
        "1e300",
        "--epochs",
        "5",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 3, "{stderr}");
}

#[test]
fn replicate_is_reproducible_and_summarizes() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, replicates: &str| {
        let out = dir.path().join(name);
        ok(&[
            "replicate",
            "--sites",
            "40",
            "--visits",
            "3",
            "--replicates",
            replicates,
            "--base-seed",
            "3",
            "--grid",
            "fixed",
            "--epochs",
            "5",
            "--width",
            "4",
            "--out",
            p(&out),
        ]);
        out
    };
    let a = run("a", "2");
    let b = run("b", "2");
    for file in ["summary.csv", "replicates.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap()
        );
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,metric,mean,sd,n\n"));
    assert!(summary.contains("\nnet,auprc,"));
    assert!(summary.contains("\nodlr,top5_occ,"));

    let single = run("single", "1");
    let replicates = fs::read_to_string(single.join("replicates.csv")).unwrap();
    let header: Vec<&str> = replicates.lines().next().unwrap().split(',').collect();
    let net_row: Vec<&str> = replicates
        .lines()
        .find(|l| l.starts_with("net,"))
        .unwrap()
        .split(',')
        .collect();
    let auprc = net_row[header.iter().position(|h| *h == "auprc").unwrap()];
    let summary = fs::read_to_string(single.join("summary.csv")).unwrap();
    let line = summary
        .lines()
        .find(|l| l.starts_with("net,auprc,"))
        .unwrap();
    let fields: Vec<&str> = line.split(',').collect();
    assert_eq!(fields[2], auprc);
    assert_eq!(fields[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(fields[4], "1");
    // Replicate 0 uses the base seed.
    assert_eq!(net_row[2], "3");
}
