use std::path::Path;
use std::process::{Command, Output};

fn harmony(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmony")).args(args).output().expect("spawn harmony")
}

fn ok(args: &[&str]) -> Output {
    let out = harmony(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let (fx_a, fx_b) = (tmp.path().join("fx_a"), tmp.path().join("fx_b"));
    ok(&["--seed", "7", "make-fixtures", "--out", p(&fx_a)]);
    ok(&["--seed", "7", "make-fixtures", "--out", p(&fx_b)]);
    assert_eq!(
        std::fs::read(fx_a.join("checksums.json")).unwrap(),
        std::fs::read(fx_b.join("checksums.json")).unwrap()
    );

    let ablation = fx_a.join("ablation.json");
    let index = tmp.path().join("index");
    ok(&["index-gallery", "--manifest", p(&ablation), "--out", p(&index), "--working-size", "128"]);

    let retrieved = tmp.path().join("retrieved.json");
    ok(&["retrieve", "--manifest", p(&ablation), "--index", p(&index), "--sample", "abl00", "--out", p(&retrieved)]);
    let view: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&retrieved).unwrap()).unwrap();
    assert_eq!(view[0]["results"][0]["reference_id"], "abl00_ref");

    let reports: Vec<Vec<u8>> = ["r1.json", "r2.json"]
        .iter()
        .map(|name| {
            let path = tmp.path().join(name);
            let args = ["--seed", "7", "evaluate", "--manifest", p(&ablation), "--index", p(&index), "--runs", "5", "--eval-size", "128", "--out", p(&path)];
            ok(&args);
            std::fs::read(&path).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);

    let images = fx_a.join("images");
    let out_png = tmp.path().join("h.png");
    let printed = ok(&[
        "harmonize",
        "--composite", p(&images.join("abl00_composite.png")),
        "--mask", p(&images.join("abl00_mask.png")),
        "--reference", p(&images.join("abl00_ref.png")),
        "--target", p(&images.join("abl00_target.png")),
        "--out", p(&out_png),
        "--dump-attention", p(&tmp.path().join("attn")),
    ]);
    assert!(String::from_utf8_lossy(&printed.stdout).starts_with("mse "));
    assert!(out_png.is_file());
    assert!(tmp.path().join("attn/weights.raif").is_file());

    let aug = tmp.path().join("aug");
    ok(&["--seed", "3", "augment", "--manifest", p(&ablation), "--out", p(&aug), "--draws", "2", "--index", p(&index)]);
    assert!(aug.join("training_manifest.json").is_file());

    let bench = tmp.path().join("bench");
    ok(&["build-benchmark", "--manifest", p(&fx_a.join("main.json")), "--out", p(&bench), "--working-size", "128"]);
    assert!(bench.join("manifest.json").is_file());
}

#[test]
fn exit_codes() {
    assert_eq!(harmony(&["evaluate", "--manifest", "m.json"]).status.code(), Some(2));
    assert_eq!(harmony(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(harmony(&["--seed", "1", "evaluate", "--manifest", "/nonexistent/m.json"]).status.code(), Some(3));
    assert_eq!(harmony(&["--seed", "1", "sgf-check", "--draws", "20"]).status.code(), Some(0));
}
