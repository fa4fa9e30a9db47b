use std::path::Path;
use std::process::{Command, Output};

use inr_audio::audio::{three_sine_mixture, wav_read, wav_write, WavFormat};

fn ainr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ainr"))
        .args(args)
        .output()
        .expect("spawn ainr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_sine(path: &Path, len: usize, seed: u64) {
    wav_write(path, &three_sine_mixture(len, 22_050, seed), WavFormat::Float32).unwrap();
}

#[test]
fn paramcount_table_one_kan() {
    let o = ainr(&[
        "paramcount",
        "--arch",
        "kan",
        "--encoding-length",
        "10",
        "--grid-size",
        "10",
        "--spline-order",
        "2",
        "--layers",
        "48,24,12",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "33768\n");
}

#[test]
fn usage_and_runtime_exit_codes() {
    assert_eq!(ainr(&["fit"]).status.code(), Some(1));
    assert_eq!(ainr(&["paramcount", "--bogus"]).status.code(), Some(1));
    assert_eq!(ainr(&["paramcount", "--arch", "mlp"]).status.code(), Some(1));
    let o = ainr(&["eval", "/nonexistent/model.ainr", "/nonexistent/clip.wav"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    // a zero step count parses but is rejected by the trainer
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    write_sine(&wav, 2048, 1);
    let m = dir.path().join("m.ainr");
    assert_eq!(
        ainr(&["fit", s(&wav), "-o", s(&m), "--steps", "0"]).status.code(),
        Some(2)
    );
}

#[test]
fn fit_then_eval_reproduces_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("clip.wav");
    write_sine(&wav, 2048, 4);
    let (m, report, trace, render) = (
        dir.path().join("m.ainr"),
        dir.path().join("r.csv"),
        dir.path().join("t.csv"),
        dir.path().join("y.wav"),
    );
    let fit = ainr(&[
        "fit",
        s(&wav),
        "-o",
        s(&m),
        "--arch",
        "siren",
        "--layers",
        "16,16",
        "--steps",
        "20",
        "--report",
        s(&report),
        "--trace",
        s(&trace),
        "--render",
        s(&render),
    ]);
    assert_eq!(
        fit.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&fit.stderr)
    );
    let fitted = stdout(&fit);
    assert!(fitted.starts_with("clip_id,arch,mse,psnr,lsd,sisnr,wd,params\n"));
    assert_eq!(std::fs::read_to_string(&report).unwrap(), fitted);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 21);
    assert_eq!(wav_read(&render).unwrap().len(), 2048);

    let eval = ainr(&["eval", s(&m), s(&wav)]);
    assert_eq!(eval.status.code(), Some(0));
    assert_eq!(stdout(&eval), fitted);
}

#[test]
fn compare_on_two_clip_dir_has_two_aggregate_rows_per_arch() {
    let dir = tempfile::tempdir().unwrap();
    write_sine(&dir.path().join("a.wav"), 2048, 1);
    write_sine(&dir.path().join("b.wav"), 2048, 2);
    let out = dir.path().join("cmp.csv");
    let o = ainr(&[
        "compare",
        "--data",
        s(dir.path()),
        "--archs",
        "kan,nerf",
        "--layers",
        "8,8",
        "--steps",
        "3",
        "-o",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 + 2 * 2);
    for arch in ["kan", "nerf"] {
        let agg = rows
            .iter()
            .filter(|r| r[1] == arch && (r[0] == "mean" || r[0] == "std"))
            .count();
        assert_eq!(agg, 2, "{arch}");
    }
}

#[test]
fn spectrogram_exports_csv_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    write_sine(&wav, 4096, 3);
    let (csv, pgm) = (dir.path().join("s.csv"), dir.path().join("s.pgm"));
    let o = ainr(&[
        "spectrogram",
        s(&wav),
        "--csv",
        s(&csv),
        "--pgm",
        s(&pgm),
        "--fft",
        "512",
        "--hop",
        "256",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let frames = 1 + (4096 - 512) / 256;
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), frames);
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn meta_train_then_reconstruct_keeps_length() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.ainr");
    let o = ainr(&[
        "meta-train",
        "--toy",
        "--small",
        "--toy-clips",
        "2",
        "--epochs",
        "1",
        "-o",
        s(&state),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let wav = dir.path().join("long.wav");
    write_sine(&wav, 5000, 8);
    let out = dir.path().join("out.wav");
    let o = ainr(&["reconstruct", s(&state), s(&wav), "-o", s(&out), "--pcm16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(wav_read(&out).unwrap().len(), 5000);
}
