use std::path::Path;
use std::process::{Command, Output};

use geostyle_core::grad::{evaluate, random_inputs, LossConfig, LossId};
use geostyle_core::tensor::{from_bytes, to_bytes};
use geostyle_core::{DType, LossWeights, Tensor};
use serde_json::Value;

fn geostyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geostyle"))
        .args(args)
        .env_remove("GEOSTYLE_THREADS")
        .output()
        .unwrap()
}

fn json_out(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(p: &Path, t: &Tensor) {
    std::fs::write(p, to_bytes(t).unwrap()).unwrap();
}

fn read(p: &Path) -> Tensor {
    from_bytes(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn swc_plan_256_49() {
    let v = json_out(&geostyle(&["swc-plan", "--height", "256", "--width", "256", "--n", "49", "--mode", "full-coverage"]));
    assert_eq!(v["patches"].as_array().unwrap().len(), 49);
    assert_eq!(v["side"], 64);
    assert_eq!(v["stride"], 32);
    assert_eq!(v["patches"][48]["e"], 192);
}

#[test]
fn loss_style_matches_library_recomposition() {
    let o = json_out(&geostyle(&["loss", "style", "--fixture", "4"]));
    let inp = random_inputs(LossId::Style, 4);
    let cfg = LossConfig::default();
    let w = LossWeights::default();
    let expect = w.lambda_pc * evaluate(LossId::Pc, &inp, &cfg).unwrap() + w.lambda_pd * evaluate(LossId::Pd, &inp, &cfg).unwrap();
    let got = o["value"].as_f64().unwrap();
    assert!((got - expect).abs() <= 1e-12 * expect.abs(), "{got} vs {expect}");
}

#[test]
fn loss_reads_named_inputs_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = Tensor::full(vec![2, 2], 0.0).unwrap();
    let b = Tensor::full(vec![2, 2], 10.0).unwrap();
    write(&dir.path().join("source_image.tnsr"), &a);
    write(&dir.path().join("target_image.tnsr"), &b);
    let v = json_out(&geostyle(&["loss", "mse", "--dir", s(dir.path())]));
    assert_eq!(v["value"].as_f64().unwrap(), 100.0);

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"weights": {"lambda_ps": 0, "lambda_z": 0, "lambda_v": 0, "lambda_m": 2}}"#).unwrap();
    let v = json_out(&geostyle(&["loss", "content", "--fixture", "1", "--config", s(&cfg)]));
    let mse = evaluate(LossId::Mse, &random_inputs(LossId::Content, 1), &LossConfig::default()).unwrap();
    assert!((v["value"].as_f64().unwrap() - 2.0 * mse).abs() < 1e-14);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(geostyle(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(geostyle(&["swc-plan", "--height", "x"]).status.code(), Some(2));
}

#[test]
fn domain_error_is_json_on_stderr() {
    let o = geostyle(&["swc-plan", "--height", "256", "--width", "256", "--n", "10"]);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("perfect square"));
}

#[test]
fn convert_round_trip_and_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-300, 7.0, 0.3]).unwrap();
    write(&p("a.tnsr"), &t);
    json_out(&geostyle(&["convert", s(&p("a.tnsr")), s(&p("a.json"))]));
    json_out(&geostyle(&["convert", s(&p("a.json")), s(&p("b.tnsr"))]));
    assert_eq!(std::fs::read(p("a.tnsr")).unwrap(), std::fs::read(p("b.tnsr")).unwrap());

    json_out(&geostyle(&["convert", s(&p("a.tnsr")), s(&p("c.tnsr")), "--dtype", "f32"]));
    let c = read(&p("c.tnsr"));
    assert_eq!(c.dtype(), DType::F32);
    assert_eq!(c.data()[0], 0.1f32 as f64);
    assert_eq!(std::fs::metadata(p("c.tnsr")).unwrap().len(), 4 + 4 + 4 + 16 + 24);
}

#[test]
fn numbers_carry_seventeen_digits() {
    let out = geostyle(&["gradcheck", "--loss", "mse", "--seed", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let value = text.split("\"value\":").nth(1).unwrap().split(',').next().unwrap();
    let mantissa = value.split('e').next().unwrap().replace(['-', '.'], "");
    assert_eq!(mantissa.len(), 17, "{value}");
}

#[test]
fn grad_writes_gradients_with_input_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let v = json_out(&geostyle(&["grad", "--loss", "psc", "--fixture", "0", "--out-dir", s(dir.path())]));
    let inp = random_inputs(LossId::Psc, 0);
    for (name, t) in inp.iter() {
        let g = read(&dir.path().join(format!("{name}.tnsr")));
        assert_eq!(g.shape(), t.shape());
        assert!(v["grad_norms"][name].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn gradcheck_rejects_zero_step() {
    let o = geostyle(&["gradcheck", "--loss", "pc", "--h", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn threads_env_matches_flag() {
    let a = geostyle(&["--threads", "2", "loss", "total", "--fixture", "9"]);
    let b = Command::new(env!("CARGO_BIN_EXE_geostyle"))
        .args(["loss", "total", "--fixture", "9"])
        .env("GEOSTYLE_THREADS", "3")
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn schedule_lists_respaced_steps() {
    let v = json_out(&geostyle(&["schedule"]));
    let steps = v["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 50);
    assert_eq!(steps[0]["t"], 20);
    assert_eq!(steps[49]["t"], 1000);
    let ab: Vec<f64> = steps.iter().map(|s| s["alpha_bar"].as_f64().unwrap()).collect();
    assert!(ab.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn guide_writes_image_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::new(vec![3, 24, 24], (0..3 * 24 * 24).map(|i| ((i * 37 % 101) as f64) / 101.0).collect()).unwrap();
    write(&dir.path().join("src.tnsr"), &img);
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"source": "src.tnsr", "guidance": {"weights": {"n": 4}}, "schedule": {"T_prime": 10, "t0": 5}, "output": "out"}"#,
    )
    .unwrap();
    let v = json_out(&geostyle(&["guide", "--config", s(&dir.path().join("run.json"))]));
    assert_eq!(v["steps"], 5);
    let out = read(&dir.path().join("out/stylized.tnsr"));
    assert_eq!(out.shape(), img.shape());
    let trace: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/trace.json")).unwrap()).unwrap();
    assert_eq!(trace["trace"].as_array().unwrap().len(), 5);
    assert_eq!(trace["trace"][0]["k"], 5);
}

#[test]
fn run_config_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"source": "x.tnsr", "sauce": 1}"#).unwrap();
    let o = geostyle(&["guide", "--config", s(&dir.path().join("run.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn metrics_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let a = Tensor::full(vec![3, 16, 16], 100.0).unwrap();
    write(&p("a.tnsr"), &a);
    write(&p("b.tnsr"), &a.scale_shift(1.0, 10.0));
    let v = json_out(&geostyle(&["metrics", "psnr", s(&p("a.tnsr")), s(&p("b.tnsr"))]));
    assert!((v["psnr"]["db"].as_f64().unwrap() - 28.131).abs() < 1e-3, "{v}");
    let v = json_out(&geostyle(&["metrics", "ssim", s(&p("a.tnsr")), s(&p("a.tnsr"))]));
    assert_eq!(v["ssim"].as_f64().unwrap(), 1.0);

    let t = Tensor::from_vec(vec![1.0, 2.0, -1.0]).unwrap();
    write(&p("t.tnsr"), &t);
    let v = json_out(&geostyle(&["metrics", "clip-i", s(&p("t.tnsr")), "--text", s(&p("t.tnsr"))]));
    assert!((v["clip_i"].as_f64().unwrap() - 1.0).abs() < 1e-15);
    let v = json_out(&geostyle(&[
        "metrics", "clip-p", "--text", s(&p("t.tnsr")), "--patch", s(&p("t.tnsr")), "--patch", s(&p("t.tnsr")),
    ]));
    assert_eq!(v["patches"], 2);

    let big = Tensor::zeros(vec![3, 128, 128]).unwrap();
    write(&p("big.tnsr"), &big);
    let v = json_out(&geostyle(&["metrics", "tiles", s(&p("big.tnsr"))]));
    assert_eq!(v["tiles"].as_array().unwrap().len(), 4);
}

#[test]
fn geometry_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write(&p("a.tnsr"), &Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    write(&p("b.tnsr"), &Tensor::from_vec(vec![0.0, 1.0, 0.0, 0.0]).unwrap());
    let v = json_out(&geostyle(&["landmarks", s(&p("a.tnsr"))]));
    assert_eq!(v["x"], serde_json::json!([1.0, 0.0]));
    let v = json_out(&geostyle(&["gdist", s(&p("a.tnsr")), s(&p("a.tnsr"))]));
    assert!(v["distance"].as_f64().unwrap() <= 1e-12);
    let v = json_out(&geostyle(&["curve", s(&p("a.tnsr")), s(&p("b.tnsr")), "--s", "0"]));
    assert!(v["distance_from_a"].as_f64().unwrap() <= 1e-12);
    let v = json_out(&geostyle(&[
        "surface", "--tau", s(&p("a.tnsr")), "--tau", s(&p("b.tnsr")), "--weights", "1,0", "--out", s(&p("m.tnsr")),
    ]));
    assert!((v["norm"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let v = json_out(&geostyle(&["weights", "--n", "4"]));
    assert_eq!(v.as_array().unwrap().len(), 4);
    let o = geostyle(&["project", s(&p("c.tnsr"))]);
    assert_eq!(o.status.code(), Some(1));
}
