use std::path::Path;
use std::process::{Command, Output};

use invdriver::eval::{MetricsReport, RunManifest};
use invdriver::scene::{file_sha256, read_dataset};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invdriver"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data", "--seed", "7", "--count", "3", "--out", "a.jsonl",
        ],
    );
    ok(
        d,
        &[
            "gen-data", "--seed", "7", "--count", "3", "--out", "b.jsonl",
        ],
    );
    assert_eq!(
        std::fs::read(d.join("a.jsonl")).unwrap(),
        std::fs::read(d.join("b.jsonl")).unwrap()
    );
    let (_, scenes) = read_dataset(&d.join("a.jsonl")).unwrap();
    assert_eq!(
        scenes.iter().map(|s| s.seed).collect::<Vec<_>>(),
        vec![7, 8, 9]
    );

    std::fs::write(
        d.join("scene.json"),
        r#"{"agent_count_max": 2, "future_steps": 4}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "gen-data",
            "--seed",
            "0",
            "--count",
            "2",
            "--out",
            "c.jsonl",
            "--config",
            "scene.json",
        ],
    );
    let (cfg, scenes) = read_dataset(&d.join("c.jsonl")).unwrap();
    assert_eq!(cfg.future_steps, 4);
    assert!(scenes
        .iter()
        .all(|s| s.agents.len() <= 2 && s.ego_future.len() == 4));
}

#[test]
fn train_eval_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--seed",
            "0",
            "--count",
            "3",
            "--out",
            "data.jsonl",
        ],
    );
    std::fs::write(
        d.join("train.json"),
        r#"{"train": {"epochs": 5, "batch_size": 3}}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "train",
            "--data",
            "data.jsonl",
            "--out",
            "m.ckpt",
            "--config",
            "train.json",
            "--epochs",
            "2",
            "--lr",
            "0.001",
        ],
    );
    let csv = std::fs::read_to_string(d.join("m.history.csv")).unwrap();
    assert!(csv.starts_with("epoch,total,map_pts,map_cls,map_dir,pred_pts,pred_cls,pred_exist,plan_pts,plan_dir,plan_cls\n"));
    assert_eq!(csv.lines().count(), 3);

    let text = ok(
        d,
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--data",
            "data.jsonl",
            "--report",
            "r1.json",
            "--plots",
            "plots",
        ],
    );
    assert!(text.contains("L2 (m)") && text.contains("Collision (%)") && text.contains("scenes/s"));
    ok(
        d,
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--data",
            "data.jsonl",
            "--report",
            "r2.json",
        ],
    );
    let r1 = std::fs::read(d.join("r1.json")).unwrap();
    assert_eq!(r1, std::fs::read(d.join("r2.json")).unwrap());
    let report: MetricsReport = serde_json::from_slice(&r1).unwrap();
    assert_eq!(report.scenes, 3);
    let manifest: RunManifest =
        serde_json::from_slice(&std::fs::read(d.join("r1.manifest.json")).unwrap()).unwrap();
    assert_eq!(
        manifest.dataset_sha256,
        file_sha256(&d.join("data.jsonl")).unwrap()
    );
    assert_eq!(manifest.train_config.unwrap().learning_rate, 0.001);
    assert!(std::fs::read_to_string(d.join("r1.txt"))
        .unwrap()
        .contains("Avg."));
    assert_eq!(std::fs::read_dir(d.join("plots")).unwrap().count(), 3);

    let listed = ok(
        d,
        &[
            "plot",
            "--ckpt",
            "m.ckpt",
            "--data",
            "data.jsonl",
            "--out",
            "svg",
            "--scenes",
            "2",
        ],
    );
    assert_eq!(listed.lines().count(), 2);
    let svg = std::fs::read_to_string(d.join("svg/scene_0001.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn ablation_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--seed",
            "0",
            "--count",
            "2",
            "--out",
            "data.jsonl",
        ],
    );
    std::fs::write(
        d.join("matrix.json"),
        r#"{"train": {"epochs": 1},
            "specs": [{"name": "full"}, {"name": "unmasked", "toggles": {"masked_self_attention": false}}]}"#,
    )
    .unwrap();
    let text = ok(
        d,
        &[
            "ablate",
            "--data",
            "data.jsonl",
            "--matrix",
            "matrix.json",
            "--out",
            "ab",
        ],
    );
    let rows: Vec<_> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("full") && rows[1].starts_with("unmasked"));
    for f in ["table.json", "table.txt", "full.ckpt", "unmasked.ckpt"] {
        assert!(d.join("ab").join(f).exists(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["--help"])), 0);
    assert_eq!(code(&run(d, &["no-such-command"])), 1);
    assert_eq!(
        code(&run(
            d,
            &["gen-data", "--seed", "0", "--count", "0", "--out", "x.jsonl"]
        )),
        1
    );

    ok(
        d,
        &[
            "gen-data",
            "--seed",
            "0",
            "--count",
            "2",
            "--out",
            "data.jsonl",
        ],
    );
    assert_eq!(
        code(&run(
            d,
            &[
                "train",
                "--data",
                "data.jsonl",
                "--out",
                "m.ckpt",
                "--epochs",
                "0"
            ]
        )),
        1
    );
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(
        code(&run(
            d,
            &[
                "train",
                "--data",
                "data.jsonl",
                "--out",
                "m.ckpt",
                "--config",
                "bad.json"
            ]
        )),
        1
    );
    // futures of four steps do not fit the six-step model
    std::fs::write(d.join("scene.json"), r#"{"future_steps": 4}"#).unwrap();
    ok(
        d,
        &[
            "gen-data",
            "--seed",
            "0",
            "--count",
            "2",
            "--out",
            "short.jsonl",
            "--config",
            "scene.json",
        ],
    );
    assert_eq!(
        code(&run(
            d,
            &[
                "train",
                "--data",
                "short.jsonl",
                "--out",
                "m.ckpt",
                "--epochs",
                "1"
            ]
        )),
        1
    );

    std::fs::write(d.join("garbage.ckpt"), b"definitely not a checkpoint").unwrap();
    assert_eq!(
        code(&run(
            d,
            &["eval", "--ckpt", "garbage.ckpt", "--data", "data.jsonl"]
        )),
        1
    );
    assert_eq!(
        code(&run(
            d,
            &["eval", "--ckpt", "missing.ckpt", "--data", "data.jsonl"]
        )),
        2
    );
    assert_eq!(code(&run(d, &["gradcheck", "--tolerance", "0"])), 1);
}

#[test]
fn gradcheck_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "gradcheck",
            "--seeds",
            "1",
            "--op-tolerance",
            "1e-30",
            "--tolerance",
            "2",
        ],
    );
    assert_eq!(code(&out), 3);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("matmul") && text.contains("FAIL") && text.contains("model_loss"));
}
