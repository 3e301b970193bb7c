use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uie_snn::data::{image_size, save_png};
use uie_snn::tensor::{Shape4, Tensor4};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uie-snn"));
    c.env_remove("UIE_SNN_DATA_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn picture(h: usize, w: usize, seed: usize) -> Tensor4<f32> {
    Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
        ((x * 13 + y * 7 + c * 61 + seed * 29 + (x * y) % 11) % 200) as f32 / 255.0 + 0.1
    })
    .unwrap()
}

/// `raw/` and `ref/` with `n` pairs of `h×w` PNGs.
fn dataset(root: &Path, n: usize, h: usize, w: usize) {
    for sub in ["raw", "ref"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }
    for i in 0..n {
        let j = picture(h, w, i);
        let raw = j.map(|v| v * 0.7 + 0.1);
        save_png(&raw, 0, &root.join(format!("raw/{i:02}.png"))).unwrap();
        save_png(&j, 0, &root.join(format!("ref/{i:02}.png"))).unwrap();
    }
}

fn train_args<'a>(data: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--depth",
        "3",
        "--base-channels",
        "2",
        "--timesteps",
        "2",
        "--resolution",
        "16",
        "--epochs",
        "3",
        "--validation-start-epoch",
        "1",
        "--seed",
        "5",
        "--threads",
        "1",
    ]
}

fn trained(tmp: &Path) -> PathBuf {
    let data = tmp.join("data");
    dataset(&data, 4, 20, 24);
    let out = tmp.join("run");
    let o = run(&train_args(&data, &out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("best.ckpt")
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 4, 16, 16);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&train_args(&data, out));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["best.ckpt", "metrics.csv", "config.toml", "train_pairs.tsv", "val_pairs.tsv"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_mse,val_mse\n"));
    assert_eq!(metrics.lines().count(), 4);
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());
    let snapshot = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(snapshot.contains("depth = 3") && snapshot.contains("seed = 5"), "{snapshot}");
    assert_eq!(fs::read_to_string(a.join("val_pairs.tsv")).unwrap().lines().count(), 1);
}

#[test]
fn missing_dataset_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = tmp.path().join("out");
    let o = run(&train_args(&missing, &out));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data"));
}

#[test]
fn invalid_settings_are_reported_together() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 2, 16, 16);
    let mut args = train_args(&data, tmp.path());
    let i = args.iter().position(|a| *a == "--timesteps").unwrap();
    args[i + 1] = "0";
    args.extend(["--threshold=-1"]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("timesteps") && err.contains("threshold"), "{err}");
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 4, 16, 16);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[network]\ndepth = 3\nbase_channels = 2\ntimesteps = 3\n[train]\nepochs = 1\n").unwrap();
    let out = tmp.path().join("out");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--resolution",
        "16",
        "--validation-start-epoch",
        "1",
        "--timesteps",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let snapshot = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.contains("timesteps = 2") && snapshot.contains("base_channels = 2"));

    fs::write(&cfg, "[network]\ndepht = 3\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infer_enhances_every_image_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let input = tmp.path().join("data/raw");
    let (a, b) = (tmp.path().join("enh_a"), tmp.path().join("enh_b"));
    for out in [&a, &b] {
        let o = run(&["infer", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let pngs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 4);
    for p in &pngs {
        assert_eq!(image_size(p).unwrap(), (16, 16));
        assert_eq!(fs::read(p).unwrap(), fs::read(b.join(p.file_name().unwrap())).unwrap());
    }
}

#[test]
fn unreadable_checkpoint_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 1, 16, 16);
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = tmp.path().join("out");
    let o = run(&["infer", "--checkpoint", s(&bad), "--input", s(&data.join("raw")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["profile", "--checkpoint", s(&bad), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn profile_reports_rates_and_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let out = tmp.path().join("prof");
    let o = run(&["profile", "--checkpoint", s(&ckpt), "--data", s(&tmp.path().join("data")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("GSOPs") && stdout.contains("ΔE"), "{stdout}");

    let csv = fs::read_to_string(out.join("energy.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<_> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (rate, flops, sops) = (col("spike_rate"), col("flops"), col("sops"));
    let (cnn, snn) = (col("cnn_energy_j"), col("snn_energy_j"));
    let (mut e_cnn, mut e_snn) = (0.0, 0.0);
    for line in lines.filter(|l| !l.starts_with("total")) {
        let f: Vec<_> = line.split(',').collect();
        let r: f64 = f[rate].parse().unwrap();
        assert!((0.0..=2.0).contains(&r), "rate {r} outside [0, T]");
        let fl: f64 = f[flops].parse().unwrap();
        assert!((f[cnn].parse::<f64>().unwrap() - fl * 4.6e-12).abs() <= 1e-9 * fl * 4.6e-12 + 1e-30);
        let so: f64 = f[sops].parse().unwrap();
        assert!((so - fl * r).abs() <= 1e-9 * so.max(1.0));
        e_cnn += f[cnn].parse::<f64>().unwrap();
        e_snn += f[snn].parse::<f64>().unwrap();
    }
    let delta = (e_cnn - e_snn) / e_cnn * 100.0;
    assert!(stdout.contains(&format!("{delta:.4}")), "{stdout} vs {delta}");
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn eval_identical_images_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 3, 24, 24);
    let out = tmp.path().join("eval");
    let o = run(&["eval", "--enhanced", s(&data.join("ref")), "--reference", s(&data.join("ref")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("eval.csv"));
    assert_eq!(rows[0], ["filename", "psnr_db", "ssim", "uciqe", "uiqm"]);
    assert_eq!(rows.len(), 4);
    let mean = read_csv(&out.join("eval_mean.csv"));
    assert_eq!(mean[1][1], "identical");
    assert_eq!(mean[1][2].parse::<f64>().unwrap(), 1.0);
    for col in [3, 4] {
        let m: f64 = rows[1..].iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / 3.0;
        assert!((mean[1][col].parse::<f64>().unwrap() - m).abs() < 1e-12);
    }

    let o = run(&["eval", "--enhanced", s(&data.join("ref")), "--reference", s(&data.join("raw")), "--out", s(&out)]);
    assert!(o.status.success());
    let rows = read_csv(&out.join("eval.csv"));
    let mean = read_csv(&out.join("eval_mean.csv"));
    let m: f64 = rows[1..].iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / 3.0;
    assert!((mean[1][1].parse::<f64>().unwrap() - m).abs() < 1e-9);
}

#[test]
fn eval_without_reference_has_no_reference_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 2, 16, 16);
    let out = tmp.path().join("eval");
    let o = run(&["eval", "--enhanced", s(&data.join("raw")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_csv(&out.join("eval.csv"))[0], ["filename", "uciqe", "uiqm"]);
}

#[test]
fn eval_without_matches_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    dataset(&a, 1, 16, 16);
    fs::create_dir_all(&b).unwrap();
    save_png(&picture(16, 16, 0), 0, &b.join("other.png")).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["eval", "--enhanced", s(&a.join("raw")), "--reference", s(&b), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
