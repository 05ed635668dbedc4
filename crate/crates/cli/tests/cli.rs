use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

/// A deliberately small configuration so the whole CLI round trip trains in
/// about a minute; quality targets are disabled accordingly.
const TINY_CONFIG: &str = r#"
k = 48
seed = 3
inversion_steps = 5

[paths]
backend = "artifacts/backend.lmk"
codec = "artifacts/codec.lmk"
registry = "artifacts/registry.json"
output = "out"

[guidance]
scale = 1.0
num_inference_steps = 20

[toy]
num_images = 256

[toy.autoencoder]
hidden = 16
steps = 300

[toy.denoiser]
channels = 8
blocks = 1
steps = 1500

[pretrain]
steps = 400
eval_trials = 256
min_bit_accuracy = 0.0
ks_significance = 0.0

[pretrain.arch]
hidden = 64
coarse_channels = 8
fine_channels = 8

[finetune]
steps = 20
pool_images = 16
variants_per_image = 1
eval_images = 8
max_clean_drop = 1.0
sample_steps = 10

[eval]
n_images = 8
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentmark"))
}

fn run_in(root: &Path, args: &[&str]) -> Output {
    let out = bin()
        .current_dir(root)
        .arg("--config")
        .arg(root.join("run.toml"))
        .args(args)
        .output()
        .expect("binary runs");
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn new_workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    std::fs::write(root.join("run.toml"), TINY_CONFIG).unwrap();
    Workspace { _dir: dir, root }
}

/// One trained workspace shared by the tests that only read it.
fn trained() -> &'static Path {
    static WS: OnceLock<Workspace> = OnceLock::new();
    &WS.get_or_init(|| {
        let ws = new_workspace();
        let out = run_in(&ws.root, &["train"]);
        assert_eq!(code(&out), 0, "train failed: {}", String::from_utf8_lossy(&out.stderr));
        ws
    })
    .root
}

#[test]
fn embed_then_verify_detects_and_unmarked_is_rejected() {
    let root = trained();
    let payload = "1011001110";
    let out = run_in(root, &["embed", "--payload", payload, "--out", "marked.png"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["payload"], payload);
    assert_eq!(v["watermark_bits"].as_str().unwrap().len(), 48);

    let out = run_in(root, &["verify", "marked.png", "--payload", payload]);
    let report = stdout_json(&out);
    assert_eq!(code(&out), 0, "{report}");
    assert_eq!(report["detected"], true);
    assert_eq!(report["threshold"], 33);

    let out = run_in(root, &["verify", "marked.png", "--payload", payload, "--paper-compat"]);
    assert_eq!(stdout_json(&out)["threshold"], 34);

    // a flat grey image carries no watermark
    let grey = latentmark::Image::constant(3, 32, 32, 0.5);
    grey.save_png(&root.join("grey.png")).unwrap();
    let out = run_in(root, &["verify", "grey.png", "--payload", payload]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(stdout_json(&out)["detected"], false);
}

#[test]
fn wrong_payload_length_is_a_usage_error() {
    let root = trained();
    let out = run_in(root, &["embed", "--payload", "101", "--out", "x.png"]);
    assert_eq!(code(&out), 64);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error correction") && err.contains("10-bit"), "{err}");
}

#[test]
fn registered_user_is_traced_by_extract() {
    let root = trained();
    let out = run_in(root, &["embed", "--user", "alice", "--register", "--out", "alice.png"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let payload = stdout_json(&out)["payload"].as_str().unwrap().to_string();

    let out = run_in(root, &["extract", "alice.png"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["payload"], payload.as_str());
    assert_eq!(v["user"], "alice");

    let out = run_in(root, &["verify", "alice.png", "--user", "alice"]);
    assert_eq!(code(&out), 0);
    let out = run_in(root, &["verify", "alice.png", "--user", "nobody"]);
    assert_eq!(code(&out), 64);
}

#[test]
fn attack_writes_a_perturbed_png() {
    let root = trained();
    let img = latentmark::Image::constant(3, 32, 32, 0.4);
    img.save_png(&root.join("flat.png")).unwrap();
    let out = run_in(root, &["attack", "flat.png", "--attack", "brightness:2", "--out", "bright.png"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bright = latentmark::Image::load(&root.join("bright.png")).unwrap();
    assert!((bright.get(0, 0, 0) - 0.8).abs() < 0.01);

    let out = run_in(root, &["attack", "flat.png", "--attack", "jpeg:500", "--out", "bad.png"]);
    assert_eq!(code(&out), 64);
    let out = run_in(root, &["attack", "missing.png", "--attack", "jpeg:50", "--out", "bad.png"]);
    assert_eq!(code(&out), 65);
}

#[test]
fn eval_writes_reports() {
    let root = trained();
    let out = run_in(root, &["eval", "--n", "4", "--attack", "noise:0.05", "--attack", "external:regen:1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("none") && text.contains("skipped"), "{text}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("out/eval.json")).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);

    let out = run_in(
        root,
        &["eval", "--n", "4", "--attack", "blur:3", "--sweep", "noise:0,0.05", "--guidance-sweep", "1,5", "--inversion-ablation", "1,5"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["sweep_noise", "guidance_sweep", "inversion_ablation"] {
        let tsv = std::fs::read_to_string(root.join(format!("out/{name}.tsv"))).unwrap();
        assert_eq!(tsv.lines().filter(|l| !l.starts_with('#')).count(), 3, "{tsv}");
        let svg = std::fs::read_to_string(root.join(format!("out/{name}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
    }
    let out = run_in(root, &["eval", "--n", "4", "--sweep", "noise"]);
    assert_eq!(code(&out), 64);
}

#[test]
fn usage_errors_exit_64() {
    let ws = new_workspace();
    assert_eq!(code(&bin().arg("--bogus").output().unwrap()), 64);
    assert_eq!(code(&run_in(&ws.root, &["--k", "20", "extract", "x.png"])), 64);
    assert_eq!(code(&run_in(&ws.root, &["--backend", "adapter:sd", "extract", "x.png"])), 64);
    // a missing checkpoint is a data error
    assert_eq!(code(&run_in(&ws.root, &["extract", "x.png"])), 65);
}

#[test]
fn seeded_commands_are_byte_identical() {
    let a = new_workspace();
    let b = new_workspace();
    for ws in [&a, &b] {
        let out = run_in(&ws.root, &["train"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = run_in(&ws.root, &["embed", "--payload", "0000011111", "--out", "m.png"]);
        assert_eq!(code(&out), 0);
        let out = run_in(&ws.root, &["eval", "--n", "4", "--attack", "noise:0.05"]);
        assert_eq!(code(&out), 0);
    }
    for file in [
        "artifacts/backend.lmk",
        "artifacts/codec.lmk",
        "m.png",
        "out/eval.json",
        "out/eval.txt",
        "out/pretrain_log.jsonl",
    ] {
        let x = std::fs::read(a.root.join(file)).unwrap();
        let y = std::fs::read(b.root.join(file)).unwrap();
        assert!(x == y, "{file} differs between identical runs");
    }
}
