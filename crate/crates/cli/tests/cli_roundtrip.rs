//! End-to-end checks of the `evc` binary: exit codes, file formats, and the
//! train/compress/decompress/eval/report pipeline on a tiny model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn evc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evc"))
}

fn run(args: &[&str]) -> Output {
    evc().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn path_str(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

/// Corpus + config + trained checkpoint, built once for the whole file.
fn fixture() -> &'static Fixture {
    static FIXTURE: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let corpus = f.path_str("corpus");
        assert_code(
            &run(&[
                "gen-corpus",
                "--out-dir",
                &corpus,
                "--count",
                "10",
                "--size",
                "72",
                "--seed",
                "5",
            ]),
            0,
        );
        std::fs::write(
            f.path("toy.ini"),
            "[model]\n\
             enc_scheme = 6, 6, 8, 8\n\
             dec_scheme = 6, 6, 8, 8\n\
             latent_channels = 8\n\
             hyper_channels = 4\n\
             seed = 3\n\
             [train]\n\
             epochs_total = 6\n\
             epochs_decay = 2\n\
             lr = 1e-3\n\
             batch_size = 2\n\
             crop = 32\n\
             seed = 11\n\
             iters_per_epoch = 8\n\
             [decay]\n\
             eta = 0.05\n",
        )
        .unwrap();
        assert_code(
            &run(&[
                "train",
                "--config",
                &f.path_str("toy.ini"),
                "--data",
                &corpus,
                "--out",
                &f.path_str("toy.evck"),
                "--metrics",
                &f.path_str("metrics.csv"),
            ]),
            0,
        );
        f
    })
}

#[test]
fn train_writes_one_checkpoint_and_metrics() {
    let f = fixture();
    assert!(f.path("toy.evck").exists());
    // variable-rate training leaves exactly one model on disk
    let checkpoints = std::fs::read_dir(f.dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "evck")
        })
        .count();
    assert_eq!(checkpoints, 1);
    let metrics = std::fs::read_to_string(f.path("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "epoch,loss,rate_bpp,mse");
    assert_eq!(lines.count(), 6);
}

#[test]
fn compress_decompress_roundtrip_and_eval_consistency() {
    let f = fixture();
    let input = f.path("corpus").join("tex0000.png");
    let bin = f.path_str("a.evc1");
    let recon = f.path_str("a_rec.png");
    assert_code(
        &run(&[
            "compress",
            "--model",
            &f.path_str("toy.evck"),
            "--rate",
            "2",
            input.to_str().unwrap(),
            &bin,
        ]),
        0,
    );
    assert_code(
        &run(&[
            "decompress",
            "--model",
            &f.path_str("toy.evck"),
            &bin,
            &recon,
        ]),
        0,
    );
    // bitstream header starts with the magic and pre-pad dimensions
    let bytes = std::fs::read(&bin).unwrap();
    assert_eq!(&bytes[0..4], b"EVC1");
    assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 72);
    assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 72);

    assert_code(
        &run(&[
            "eval",
            "--model",
            &f.path_str("toy.evck"),
            "--data",
            &f.path_str("corpus"),
            "--out-dir",
            &f.path_str("reports"),
            "--label",
            "toy",
        ]),
        0,
    );
    let eval_csv = std::fs::read_to_string(f.path("reports").join("toy_eval.csv")).unwrap();
    let eval_psnr: f64 = eval_csv
        .lines()
        .find(|l| l.starts_with("tex0000.png,2,"))
        .expect("row for image 0 at rate 2")
        .split(',')
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();

    // the standalone decompress agrees with the eval pipeline's PSNR
    let orig = evc_cli::io::load_image(&input).unwrap();
    let rec = evc_cli::io::load_image(Path::new(&recon)).unwrap();
    let direct_psnr = evc_core::metrics::psnr(&orig, &rec).unwrap();
    assert!(
        direct_psnr >= eval_psnr - 1e-6,
        "direct {direct_psnr} vs eval {eval_psnr}"
    );

    let curve = std::fs::read_to_string(f.path("reports").join("toy_curve.csv")).unwrap();
    assert!(curve.starts_with("label,bpp,psnr\n"));
    assert_eq!(curve.lines().count(), 5); // header + 4 rate points
}

#[test]
fn bdrate_of_identical_curves_prints_zero() {
    let f = fixture();
    let curve = f.path("self.csv");
    std::fs::write(
        &curve,
        "label,bpp,psnr\nc,0.25,30.0\nc,0.5,33.0\nc,1.0,36.0\nc,2.0,39.0\n",
    )
    .unwrap();
    let out = run(&[
        "bdrate",
        curve.to_str().unwrap(),
        curve.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.00");
}

#[test]
fn report_reproduces_the_worked_example() {
    let f = fixture();
    // scaling every rate by k shifts log-rate uniformly, so BD-Rate against
    // the anchor is exactly (k - 1) * 100
    let write_scaled = |name: &str, k: f64| -> String {
        let base = [(0.25, 30.0), (0.5, 33.0), (1.0, 36.0), (2.0, 39.0)];
        let mut text = String::from("label,bpp,psnr\n");
        for (bpp, psnr) in base {
            text += &format!("x,{},{}\n", bpp * k, psnr);
        }
        let p = f.path(name);
        std::fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let anchor = write_scaled("anchor.csv", 1.0);
    let baseline = write_scaled("baseline.csv", 1.011); // +1.1%
    let ours = write_scaled("ours.csv", 0.996); // -0.4%
    let teacher = write_scaled("teacher.csv", 0.989); // -1.1%
    let report_out = f.path_str("report.csv");
    let out = run(&[
        "report",
        "--baseline",
        &baseline,
        "--ours",
        &ours,
        "--teacher",
        &teacher,
        "--anchor",
        &anchor,
        "--label",
        "ml",
        "--out",
        &report_out,
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("relative improvement: 68%"),
        "stdout: {stdout}"
    );
    let csv = std::fs::read_to_string(&report_out).unwrap();
    assert!(csv.starts_with("config,bd_baseline,bd_ours,bd_teacher,relative_improvement_pct\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("ml,"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",68"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let f = fixture();
    // usage: unknown flag
    assert_code(&run(&["compress", "--bogus"]), 1);
    // usage: bad scheme string
    assert_code(
        &run(&[
            "prune",
            "--config",
            &f.path_str("toy.ini"),
            "--teacher",
            &f.path_str("toy.evck"),
            "--student-enc",
            "tiny",
            "--student-dec",
            "small",
            "--out",
            &f.path_str("x.evck"),
        ]),
        1,
    );
    // data: missing input file
    assert_code(
        &run(&[
            "compress",
            "--model",
            &f.path_str("toy.evck"),
            &f.path_str("missing.png"),
            &f.path_str("out.evc1"),
        ]),
        2,
    );
    // decode: corrupt bitstream
    let bad = f.path("bad.evc1");
    std::fs::write(&bad, b"EVC1x garbage").unwrap();
    assert_code(
        &run(&[
            "decompress",
            "--model",
            &f.path_str("toy.evck"),
            bad.to_str().unwrap(),
            &f.path_str("bad.png"),
        ]),
        3,
    );
}

#[test]
fn decompression_restores_odd_dimensions() {
    let f = fixture();
    let model = evc_cli::io::load_model(&f.path("toy.evck")).unwrap();
    let mut rng = evc_core::rng::Rng::new(77);
    for _ in 0..50 {
        let w = 1 + rng.below(150);
        let h = 1 + rng.below(150);
        if w % 64 == 0 && h % 64 == 0 {
            continue;
        }
        let img = evc_core::image::synthetic_texture(w, h, &mut rng);
        let (padded, orig) = evc_core::metrics::pad64(&img);
        let x: evc_core::Tensor<f32> = padded.to_tensor();
        let bs = evc_core::codec::compress(&model, &x, 0, orig).unwrap();
        let recon = evc_core::codec::decompress(&model, &bs).unwrap();
        let shape = recon.shape();
        assert_eq!((shape.w, shape.h), (w, h), "dims lost for {w}x{h}");
    }
}

#[test]
fn prune_produces_a_student_checkpoint_and_report() {
    let f = fixture();
    std::fs::create_dir_all(f.path("prune_out")).unwrap();
    let out = run(&[
        "prune",
        "--config",
        &f.path_str("toy.ini"),
        "--data",
        &f.path_str("corpus"),
        "--teacher",
        &f.path_str("toy.evck"),
        "--which",
        "both",
        "--student-enc",
        "3,3,4,4",
        "--student-dec",
        "3,3,4,4",
        "--out",
        &f.path_str("prune_out/student.evck"),
        "--baseline-out",
        &f.path_str("prune_out/baseline.evck"),
        "--report",
        &f.path_str("prune_out/prune.txt"),
    ]);
    assert_code(&out, 0);
    let student = evc_cli::io::load_model(&f.path("prune_out/student.evck")).unwrap();
    assert_eq!(
        student.cfg.enc_scheme,
        evc_core::model::ChannelScheme::new(3, 3, 4, 4)
    );
    let report = std::fs::read_to_string(f.path("prune_out/prune.txt")).unwrap();
    // one line per mask: 4 kinds x 4 stages x 2 halves
    assert_eq!(report.lines().count(), 32);
    assert!(report.contains("survivors="));
    assert!(f.path("prune_out/baseline.evck").exists());
}

#[test]
fn rrl_builds_and_saves_a_bank() {
    let f = fixture();
    std::fs::write(
        f.path("rrl.ini"),
        "[model]\nseed = 3\n\
         [train]\nepochs_total = 2\nlr = 1e-3\nbatch_size = 2\ncrop = 32\nseed = 21\niters_per_epoch = 4\n",
    )
    .unwrap();
    let out = run(&[
        "rrl",
        "--config",
        &f.path_str("rrl.ini"),
        "--data",
        &f.path_str("corpus"),
        "--teacher",
        &f.path_str("toy.evck"),
        "--regime",
        "separate",
        "--bank-size",
        "2",
        "--student-scheme",
        "4,4,6,6",
        "--out",
        &f.path_str("bank.evcb"),
    ]);
    assert_code(&out, 0);
    let bank = evc_cli::io::load_bank(&f.path("bank.evcb")).unwrap();
    assert_eq!(bank.encoders.len(), 2);
    // the bank decodes: ensemble-encode one image and strip the id byte
    let img = evc_cli::io::load_image(&f.path("corpus").join("tex0001.png")).unwrap();
    let (bs, choice) =
        evc_core::scalable::ensemble_encode(&img, &bank, 2, 1).unwrap();
    assert_eq!(bs.encoder_id, Some(choice.winner as u8));
    // argmin: the winner's score is minimal, ties to the lowest index
    let winner_score = choice.rows[choice.winner].score;
    for row in &choice.rows {
        assert!(winner_score <= row.score);
        if row.score == winner_score {
            assert!(choice.winner <= row.encoder);
        }
    }
    let winner_model = bank.model_with(choice.winner).unwrap();
    let mut stripped = bs.clone();
    stripped.encoder_id = None;
    let a = evc_core::codec::decompress(&winner_model, &bs).unwrap();
    let b = evc_core::codec::decompress(&winner_model, &stripped).unwrap();
    assert_eq!(a, b);

    // k = 1 degenerates to encoder 0 and matches plain compression bytes
    let (bs1, c1) = evc_core::scalable::ensemble_encode(&img, &bank, 1, 1).unwrap();
    assert_eq!(c1.winner, 0);
    let (padded, orig) =
        evc_core::metrics::pad_to_multiple(&img, bank.shared.cfg.z_factor());
    let x: evc_core::Tensor<f32> = padded.to_tensor();
    let plain = evc_core::codec::compress(&bank.model_with(0).unwrap(), &x, 1, orig).unwrap();
    let mut stripped1 = bs1.clone();
    stripped1.encoder_id = None;
    assert_eq!(stripped1.to_bytes(), plain.to_bytes());

    // out-of-range ensemble sizes are rejected
    assert!(evc_core::scalable::ensemble_encode(&img, &bank, 0, 1).is_err());
    assert!(evc_core::scalable::ensemble_encode(&img, &bank, 3, 1).is_err());
}
