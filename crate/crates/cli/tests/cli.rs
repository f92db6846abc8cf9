use std::path::Path;
use std::process::{Command, Output};

use depthpost_core::data::{
    generate_scene, sample_sparse, write_dataset, write_depth_png, write_rgb_png, SceneConfig,
};

const TINY: &str = "\
[run]
seed = 2

[data]
height = 16
width = 48
scenes = 20

[optimizer]
lr = 0.001
total_steps = 2
batch = 1
eval_every = 1
";

fn depthpost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthpost"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rejected(o: &Output, needle: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert!(
        err.starts_with("depthpost: error:") && err.contains(needle),
        "{err}"
    );
}

#[test]
fn bad_invocations_exit_nonzero() {
    assert!(!depthpost(&[]).status.success());
    assert!(!depthpost(&["train-dcn", "--mode", "telepathic"])
        .status
        .success());
    rejected(
        &depthpost(&["train-cpn", "--config", "/nonexistent/run.ini"]),
        "/nonexistent/run.ini",
    );
}

#[test]
fn train_eval_and_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.ini");
    std::fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");

    let o = depthpost(&[
        "train-dcn",
        "--mode",
        "supervised",
        "--config",
        s(&config),
        "--out",
        s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.is_file() && run.join("log.csv").is_file() && run.join("val.csv").is_file());

    // Prior-using modes need a prior checkpoint.
    let o = depthpost(&[
        "train-dcn",
        "--mode",
        "unsupervised",
        "--config",
        s(&config),
        "--out",
        s(&run),
    ]);
    rejected(&o, "checkpoint");
    // The config names no mode, so train-cpn trains the prior.
    let prior = dir.path().join("prior");
    let o = depthpost(&[
        "train-cpn",
        "--config",
        s(&config),
        "--out",
        s(&prior),
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cfg = SceneConfig::new(16, 48);
    let scenes: Vec<_> = (0..2)
        .map(|i| generate_scene(40 + i, &cfg).unwrap())
        .collect();
    let manifest = write_dataset(&dir.path().join("set"), &scenes).unwrap();
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)];
        args.extend_from_slice(extra);
        depthpost(&args)
    };
    let a = eval(&[]);
    let b = eval(&[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 4);
    rejected(&eval(&["--aggregation", "median"]), "median");
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    rejected(
        &depthpost(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&empty)]),
        "no frames",
    );

    let scene = &scenes[0];
    let sample = sample_sparse(scene, 0.1, 1).unwrap();
    let (image, sparse, gt) = (
        dir.path().join("i.png"),
        dir.path().join("z.png"),
        dir.path().join("d.png"),
    );
    write_rgb_png(&image, &scene.image).unwrap();
    write_depth_png(&sparse, &sample.z_map(), &sample.validity()).unwrap();
    write_depth_png(&gt, &scene.depth, &scene.validity()).unwrap();
    let pred = dir.path().join("pred");
    let o = depthpost(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--sparse",
        s(&sparse),
        "--gt",
        s(&gt),
        "--cpn",
        s(&prior.join("model.ckpt")),
        "--out",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(
        text.lines().any(|l| l.starts_with("posterior_score ")),
        "{text}"
    );
    assert!(pred.join("i_depth.png").is_file() && pred.join("i_error.png").is_file());

    let missing = dir.path().join("missing.png");
    let o = depthpost(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&missing),
        "--sparse",
        s(&sparse),
        "--out",
        s(&pred),
    ]);
    rejected(&o, "missing.png");
}

#[test]
fn ablate_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.ini");
    std::fs::write(
        &config,
        format!("{TINY}\n[ablate]\nnorms = 1,2\nalphas = 0,0.045\n"),
    )
    .unwrap();
    let prior = dir.path().join("prior");
    let o = depthpost(&["train-cpn", "--config", s(&config), "--out", s(&prior)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("ablate");
    let o = depthpost(&[
        "ablate",
        "--config",
        s(&config),
        "--cpn",
        s(&prior.join("model.ckpt")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.as_bytes(), o.stdout.as_slice());
    let alphas: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(alphas, ["0", "0.045"]);

    let o = depthpost(&["ablate", "--config", s(&config), "--out", s(&out)]);
    rejected(&o, "checkpoint");
}
