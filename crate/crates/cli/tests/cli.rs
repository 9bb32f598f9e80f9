use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixmodal_cli::files::{self, parse_metrics, read_pgm};
use mixmodal_core::synth::{psnr, render, Autoencoder, ShapeSpec};
use mixmodal_core::Checkpoint32;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn mixmodal(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixmodal"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = mixmodal(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Corpora, autoencoder and a trained base stage in a fresh run dir.
fn prepared() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&out, &["synth-data", "--config", TINY]);
    ok(&out, &["train-vae"]);
    ok(&out, &["finetune-decoder"]);
    ok(&out, &["train-base"]);
    (dir, out)
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--bogus"][..], &["frobnicate"], &["gradcheck", "--nope"], &["ablate", "--kind", "x"], &[]] {
        let o = mixmodal(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr).into_owned();
        assert!(err.starts_with("error:") || err.starts_with("Usage"), "{args:?}: {err}");
        if args.len() < 2 {
            assert!(err.contains("Usage"), "{args:?}: {err}");
        }
    }
}

#[test]
fn runtime_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = mixmodal(dir.path(), &["train-base"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io: "), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(TINY).unwrap().replace("cfg_scale", "cfg_sclae")).unwrap();
    let o = mixmodal(dir.path(), &["synth-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: config: ") && err.contains("cfg_sclae"), "{err}");
}

#[test]
fn pipeline_writes_every_artifact() {
    let (_dir, out) = prepared();
    ok(&out, &["post-train"]);
    let prompt = "a small bright circle at top-left [SEP] [BOI]";
    ok(&out, &["generate", "--prompt", prompt, "--seed", "7"]);
    let samples = out.join("samples");
    let first: Vec<Vec<u8>> = ["sample_000.tsv", "sample_000.txt", "sample_000_0.pgm"]
        .iter()
        .map(|f| fs::read(samples.join(f)).unwrap())
        .collect();
    ok(&out, &["generate", "--prompt", prompt, "--seed", "7"]);
    for (f, want) in ["sample_000.tsv", "sample_000.txt", "sample_000_0.pgm"].iter().zip(&first) {
        assert_eq!(&fs::read(samples.join(f)).unwrap(), want, "{f} differs between runs");
    }
    read_pgm(&first[2]).unwrap();
    let tsv = String::from_utf8(first[0].clone()).unwrap();
    assert!(tsv.lines().any(|l| l.ends_with("forced\t[EOI]")), "{tsv}");

    // image prompt through a PGM file
    let pgm = out.join("in.pgm");
    fs::write(&pgm, render(&ShapeSpec::from_index(5)).to_pgm()).unwrap();
    let back = read_pgm(&fs::read(&pgm).unwrap()).unwrap();
    let src = render(&ShapeSpec::from_index(5));
    assert!(back.pixels().iter().zip(src.pixels()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    ok(&out, &["generate", "--image", pgm.to_str().unwrap()]);

    let report = ok(&out, &["eval", "--prompts", "4"]);
    for key in ["psnr_vq", "psnr_continuous", "ssim_continuous", "heldout_total", "caption_validity"] {
        assert!(report.lines().any(|l| l.starts_with(key)), "{key} missing:\n{report}");
    }
    assert_eq!(fs::read_to_string(out.join("eval.txt")).unwrap(), report);
    assert_eq!(fs::read_to_string(out.join("captions.tsv")).unwrap().lines().count(), 5);

    let table = ok(&out, &["ablate", "--kind", "head"]);
    assert!(table.contains("diffusion") && table.contains("mse"));
    assert!(out.join("ablation_head.tsv").exists());
}

#[test]
fn resumed_stage_matches_a_straight_run() {
    let (_dir, out) = prepared();
    let straight = parse_metrics(&fs::read_to_string(out.join("base.metrics")).unwrap()).unwrap();
    assert_eq!(straight.len(), 10);

    ok(&out, &["train-base", "--steps", "4", "--checkpoint", out.join("ae.ckpt").to_str().unwrap()]);
    ok(&out, &["train-base", "--steps", "10", "--checkpoint", out.join("base.ckpt").to_str().unwrap()]);
    let resumed = parse_metrics(&fs::read_to_string(out.join("base.metrics")).unwrap()).unwrap();
    assert_eq!(resumed.len(), 10);
    for (a, b) in straight.iter().zip(&resumed) {
        assert_eq!(a, b);
    }
}

#[test]
fn json_metrics_and_gradcheck_table() {
    let (_dir, out) = prepared();
    ok(&out, &["post-train", "--steps", "3", "--jsonl"]);
    let log = fs::read_to_string(out.join("post.metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.starts_with("{\"step\":") && l.contains("\"ar\":")));

    let table = ok(&out, &["gradcheck", "--cases", "2"]);
    assert!(table.lines().any(|l| l.starts_with("diffusion_loss\t")));
    assert!(table.lines().skip(1).all(|l| l.ends_with("\tok")), "{table}");
}

#[test]
fn reported_vq_psnr_uses_the_quantized_path() {
    let (_dir, out) = prepared();
    let base = out.join(files::BASE_CKPT);
    let report = ok(&out, &["eval", "--prompts", "1", "--checkpoint", base.to_str().unwrap()]);
    let reported: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("psnr_vq "))
        .unwrap()
        .parse()
        .unwrap();
    let ck = Checkpoint32::load(&out.join(files::AE_CKPT)).unwrap();
    let ae = Autoencoder::<f32>::from_store(&ck.params).unwrap();
    let held = files::load_corpus(&out.join(files::HELD_OUT_CORPUS)).unwrap();
    let mean = held
        .iter()
        .map(|it| psnr(&ae.reconstruct_quantized(&it.image).unwrap(), &it.image))
        .sum::<f64>()
        / held.len() as f64;
    assert!((reported - mean).abs() < 1e-3, "reported {reported}, quantized path {mean}");
}

#[test]
fn pgm_reader_rejects_bad_input() {
    assert!(read_pgm(b"P5 16 16 255\n").is_err());
    assert!(read_pgm(b"not an image").is_err());
    let mut small = b"P5 8 8 255\n".to_vec();
    small.extend([0u8; 64]);
    assert!(read_pgm(&small).is_err());
    let img = render(&ShapeSpec::from_index(40));
    assert_eq!(read_pgm(&img.to_pgm()).unwrap().to_pgm(), img.to_pgm());
}
