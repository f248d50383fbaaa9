//! End-to-end checks of the binary: exit codes, config precedence, and the
//! generate/train/eval/infer/visualize/sweep/gradcheck flows on a micro
//! dataset small enough to run in seconds.

use std::path::Path;
use std::process::{Command, Output};

fn aocr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aocr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("no signal")
}

/// Tiny two-view dataset the train/eval/infer tests share.
fn generate_micro(dir: &Path, count: usize, seed: u64) -> Output {
    aocr(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--views",
        "2",
        "--view-h",
        "24",
        "--view-w",
        "24",
        "--scale",
        "1",
        "--len-min",
        "1",
        "--len-max",
        "3",
        "--clutter",
        "0.2",
    ])
}

const MICRO_MODEL: &[&str] = &[
    "--t-steps",
    "4",
    "--views",
    "2",
    "--view-h",
    "24",
    "--view-w",
    "24",
    "--preset",
    "c2,p,c3,p",
    "--lstm-width",
    "8",
    "--attn-dim",
    "4",
    "--embed-dim",
    "4",
];

fn train_micro(data: &Path, out: &Path, seed: u64) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(MICRO_MODEL);
    args.extend_from_slice(&[
        "--steps",
        "4",
        "--batch-size",
        "2",
        "--base-lr",
        "0.05",
        "--train-split",
        "all",
        "--eval-split",
        "all",
        "--augment",
        "false",
        "--eval-every",
        "2",
    ]);
    let seed_s = seed.to_string();
    args.extend_from_slice(&["--seed", &seed_s]);
    aocr(&args)
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let o = aocr(&[]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o) + &stderr(&o);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_flags_are_rejected_with_exit_one() {
    assert_eq!(code(&aocr(&["--bogus"])), 1);
    assert_eq!(code(&aocr(&["generate", "--nope", "x"])), 1);
    assert_eq!(code(&aocr(&["not-a-command"])), 1);
}

#[test]
fn generate_is_reproducible_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = generate_micro(&a, 5, 5);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("command=generate"));
    assert!(out.contains("seed=5"));

    let sidecar = std::fs::read_to_string(a.join("generate.config")).unwrap();
    for line in sidecar.lines() {
        assert!(out.contains(line), "stdout echo misses `{line}`");
    }

    assert_eq!(code(&generate_micro(&b, 5, 5)), 0);
    assert_eq!(
        std::fs::read(a.join("manifest.tsv")).unwrap(),
        std::fs::read(b.join("manifest.tsv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("imgs/000000_v0.ppm")).unwrap(),
        std::fs::read(b.join("imgs/000000_v0.ppm")).unwrap(),
        "same seed renders the same pixels"
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("gen.conf");
    std::fs::write(
        &conf,
        "count=4\nseed=9\nviews=1\nview-h=24\nview-w=24\nscale=1\nlen-min=1\nlen-max=2\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("ds");
    let o = aocr(&[
        "generate",
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        conf.to_str().unwrap(),
        "--count",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("count=2"), "flag beats config file");
    assert!(stdout(&o).contains("views=1"), "config beats default");
    let manifest = std::fs::read_to_string(out_dir.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);

    std::fs::write(&conf, "coutn=4\n").unwrap();
    let o = aocr(&[
        "generate",
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        conf.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "misspelled config keys are usage errors");
    assert!(stderr(&o).contains("coutn"));

    std::fs::write(&conf, "no equals sign\n").unwrap();
    let o = aocr(&[
        "generate",
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        conf.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_eval_infer_agree_on_the_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    assert_eq!(code(&generate_micro(&data, 8, 11)), 0);

    let run = tmp.path().join("run");
    let o = train_micro(&data, &run, 3);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("model.ckpt").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,train_loss,eval_loss,eval_fullseq_acc\n"));
    let last = metrics.lines().last().unwrap();
    let last_acc = last.rsplit(',').next().unwrap();

    let o = aocr(&[
        "eval",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "all",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval_out = stdout(&o);
    let acc_line = eval_out
        .lines()
        .find(|l| l.starts_with("fullseq_acc="))
        .expect("eval prints the accuracy");
    assert_eq!(
        acc_line.strip_prefix("fullseq_acc=").unwrap(),
        last_acc,
        "eval reproduces the final training metric on the same split"
    );

    let o = aocr(&[
        "infer",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "all",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let infer_out = stdout(&o);
    let config_lines = std::fs::read_to_string(run.join("infer.config"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(
        infer_out.lines().count(),
        config_lines + 8,
        "one prediction line per sample after the config echo"
    );
}

#[test]
fn train_is_bit_reproducible_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    assert_eq!(code(&generate_micro(&data, 6, 21)), 0);
    let (r1, r2, r3) = (
        tmp.path().join("r1"),
        tmp.path().join("r2"),
        tmp.path().join("r3"),
    );
    assert_eq!(code(&train_micro(&data, &r1, 7)), 0);
    assert_eq!(code(&train_micro(&data, &r2, 7)), 0);
    assert_eq!(code(&train_micro(&data, &r3, 8)), 0);
    let m1 = std::fs::read(r1.join("metrics.csv")).unwrap();
    let m2 = std::fs::read(r2.join("metrics.csv")).unwrap();
    let m3 = std::fs::read(r3.join("metrics.csv")).unwrap();
    assert_eq!(m1, m2, "same seed, same metrics bytes");
    assert_ne!(m1, m3, "different seed diverges");
    assert_eq!(
        std::fs::read(r1.join("model.ckpt")).unwrap(),
        std::fs::read(r2.join("model.ckpt")).unwrap(),
        "checkpoints match bit for bit"
    );
}

#[test]
fn visualize_writes_one_overlay_per_step_plus_sheet() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    assert_eq!(code(&generate_micro(&data, 6, 31)), 0);
    let run = tmp.path().join("run");
    assert_eq!(code(&train_micro(&data, &run, 5)), 0);

    let viz = tmp.path().join("viz");
    let o = aocr(&[
        "visualize",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "all",
        "--out",
        viz.to_str().unwrap(),
        "--copies",
        "2",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("prediction="));
    for t in 1..=4 {
        assert!(viz.join(format!("000000_t{t}.ppm")).exists());
    }
    assert!(viz.join("000000_sheet.ppm").exists());
}

#[test]
fn gradcheck_prints_every_op_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = aocr(&["gradcheck", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for op in [
        "matmul_mat_mat",
        "conv2d_same",
        "maxpool2d",
        "softmax_rows",
        "smoothed_cross_entropy",
        "model_loss_standard",
        "model_loss_location",
    ] {
        assert!(out.contains(op), "missing op line for {op}");
    }
    assert!(out.contains("worst rel err"));
    assert!(out.contains("all checks passed"));
}

#[test]
fn sweep_writes_depth_sorted_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    assert_eq!(code(&generate_micro(&data, 6, 41)), 0);
    let out_dir = tmp.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--presets",
        "c2,c2,p,c3,p;c2,p,c3,p",
        "--warmup",
        "1",
        "--timed",
        "3",
    ];
    args.extend_from_slice(MICRO_MODEL);
    args.extend_from_slice(&[
        "--steps",
        "2",
        "--batch-size",
        "2",
        "--train-split",
        "all",
        "--eval-split",
        "all",
        "--augment",
        "false",
    ]);
    let o = aocr(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "preset,fh,fw,fc,depth,rf,acc,ms_per_image");
    assert!(
        lines[1].starts_with("\"c2,p,c3,p\","),
        "shallower preset sorts first: {}",
        lines[1]
    );
    assert!(lines[2].starts_with("\"c2,c2,p,c3,p\","));
    let svg = std::fs::read_to_string(out_dir.join("sweep_curve.svg")).unwrap();
    assert!(svg.starts_with("<svg ") && svg.contains("</svg>"));
}

#[test]
fn runtime_failures_exit_two_with_a_diagnostic() {
    let o = aocr(&[
        "eval",
        "--checkpoint",
        "/definitely/not/here.ckpt",
        "--data",
        "/nor/this",
    ]);
    assert_eq!(code(&o), 2);
    assert!(!stderr(&o).is_empty());

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    assert_eq!(code(&generate_micro(&data, 4, 51)), 0);
    let o = aocr(&[
        "infer",
        "--checkpoint",
        data.join("manifest.tsv").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "a manifest is not a checkpoint");
    assert!(stderr(&o).contains("error"));
}
