//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use evc_core::codec::{self, Bitstream};
use evc_core::image::{synthetic_corpus, ImageU8};
use evc_core::mask::PruneTarget;
use evc_core::metrics::{
    bd_rate, bpp, pad_to_multiple, psnr, relative_improvement_label, RDCurve,
};
use evc_core::model::{ChannelScheme, Model};
use evc_core::scalable::{
    ensemble_encode, ensemble_report_csv, train_end_to_end, train_rrl_step, train_separate,
    EncoderBank, NewEncoderInit, DEFAULT_BANK_SIZE,
};
use evc_core::tensor::Tensor;
use evc_core::train::{
    distill_pipeline, metrics_csv, train, Dataset, TrainSubject, Trainable,
};

use crate::config::FullConfig;
use crate::report::{aggregate_curve, write_eval_report, write_rd_curve, EvalRow};
use crate::{io, CliError, CliResult};

fn load_training_images(
    cfg: &FullConfig,
    data_override: Option<&Path>,
) -> CliResult<Vec<ImageU8>> {
    let dir = data_override
        .map(PathBuf::from)
        .or_else(|| cfg.dataset_dir.clone())
        .ok_or_else(|| {
            CliError::Usage("no dataset: pass --data or set [dataset] dir in the config".into())
        })?;
    Ok(io::load_corpus(&dir)?.into_iter().map(|(_, i)| i).collect())
}

pub fn cmd_train(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    metrics_out: Option<&Path>,
) -> CliResult<()> {
    let cfg = FullConfig::from_ini(&crate::config::Ini::load(config)?)?;
    let images = load_training_images(&cfg, data)?;
    let dataset = Dataset::new(images)?;
    let model = Model::<f32>::build(cfg.model, &cfg.rate_points, cfg.model_seed)?;
    let result = train(
        TrainSubject::Plain(model),
        &cfg.train,
        &dataset,
        None,
        Trainable::All,
    )?;
    let model = result.subject.into_plain()?;
    io::save_model(out, &model)?;
    if let Some(p) = metrics_out {
        std::fs::write(p, metrics_csv(&result.metrics))?;
    }
    let last = result.metrics.last().unwrap();
    println!(
        "trained {} epochs; final loss {:.5} (rate {:.4} bpp, mse {:.6}); wrote {}",
        result.metrics.len(),
        last.loss,
        last.rate_bpp,
        last.mse,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_prune(
    config: &Path,
    data: Option<&Path>,
    teacher: &Path,
    which: &str,
    student_enc: &str,
    student_dec: &str,
    out: &Path,
    baseline_out: Option<&Path>,
    report_out: Option<&Path>,
) -> CliResult<()> {
    let cfg = FullConfig::from_ini(&crate::config::Ini::load(config)?)?;
    let images = load_training_images(&cfg, data)?;
    let dataset = Dataset::new(images)?;
    let teacher_model = io::load_model(teacher)?;
    let which = match which.to_lowercase().as_str() {
        "encoder" | "enc" => PruneTarget::Encoder,
        "decoder" | "dec" => PruneTarget::Decoder,
        "both" => PruneTarget::Both,
        other => return Err(CliError::Usage(format!("--which `{other}`: use encoder/decoder/both"))),
    };
    let enc_scheme = crate::config::parse_scheme(student_enc)?;
    let dec_scheme = crate::config::parse_scheme(student_dec)?;
    if cfg.train.epochs_decay == 0 {
        return Err(CliError::Usage(
            "[train] epochs_decay must be positive for pruning".into(),
        ));
    }
    let result = distill_pipeline(
        &teacher_model,
        which,
        enc_scheme,
        dec_scheme,
        &cfg.train,
        &cfg.decay,
        &dataset,
        cfg.model_seed ^ 0xBA5E,
    )?;
    io::save_model(out, &result.student)?;
    if let Some(p) = baseline_out {
        io::save_model(p, &result.baseline)?;
    }
    if let Some(p) = report_out {
        std::fs::write(p, &result.prune_report)?;
    }
    println!(
        "student {:?}/{:?} written to {} ({} masks frozen, {} forced)",
        result.student.cfg.enc_scheme,
        result.student.cfg.dec_scheme,
        out.display(),
        result.chosen.len(),
        result.events.force_frozen
    );
    Ok(())
}

pub fn cmd_compress(model_path: &Path, rate: usize, input: &Path, output: &Path) -> CliResult<()> {
    let model = io::load_model(model_path)?;
    if rate >= model.quant.rate_points() {
        return Err(CliError::Usage(format!(
            "--rate {rate} out of range; the checkpoint has {} rate points",
            model.quant.rate_points()
        )));
    }
    let image = io::load_image(input)?;
    let (padded, orig) = pad_to_multiple(&image, model.cfg.z_factor());
    let x: Tensor<f32> = padded.to_tensor();
    let bs = codec::compress(&model, &x, rate, orig)?;
    std::fs::write(output, bs.to_bytes())?;
    println!(
        "{} -> {} ({} bytes, {:.4} bpp)",
        input.display(),
        output.display(),
        bs.total_bytes(),
        bpp(bs.total_bytes(), image.width, image.height)
    );
    Ok(())
}

pub fn cmd_decompress(model_path: &Path, input: &Path, output: &Path) -> CliResult<()> {
    let model = io::load_model(model_path)?;
    let bytes = std::fs::read(input)?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let tensor = codec::decompress(&model, &bs)
        .map_err(|e| CliError::Decode(e.to_string()))?;
    let image = ImageU8::from_tensor(&tensor)?;
    io::save_image(output, &image)?;
    println!(
        "{} -> {} ({}x{})",
        input.display(),
        output.display(),
        image.width,
        image.height
    );
    Ok(())
}

pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub bd_vs_anchor: Option<f64>,
}

/// Walk a corpus, compress/decompress at every rate index, and emit the
/// evaluation report plus the model's RD curve.
pub fn cmd_eval(
    model_path: &Path,
    data: &Path,
    out_dir: &Path,
    label: &str,
    anchor: Option<&Path>,
) -> CliResult<EvalOutcome> {
    let model = io::load_model(model_path)?;
    let corpus = io::load_corpus(data)?;
    std::fs::create_dir_all(out_dir)?;
    let rates = model.quant.rate_points();
    let mut rows = Vec::new();
    for (name, image) in &corpus {
        let (padded, orig) = pad_to_multiple(image, model.cfg.z_factor());
        let x: Tensor<f32> = padded.to_tensor();
        for rate in 0..rates {
            let t0 = Instant::now();
            let y = codec::encode_latent(&model, &x)?;
            let enc_net_ms = t0.elapsed().as_secs_f64() * 1e3;

            let t1 = Instant::now();
            let bs = codec::compress_from_latent(&model, &y, rate, orig)?;
            let decoded = codec::decode_latent(&model, &bs)
                .map_err(|e| CliError::Decode(e.to_string()))?;
            let entropy_ms = t1.elapsed().as_secs_f64() * 1e3;

            let t2 = Instant::now();
            let x_hat = codec::synthesize(&model, &decoded.y_hat)?;
            let dec_net_ms = t2.elapsed().as_secs_f64() * 1e3;

            let cropped = evc_core::nn::crop_hw(&x_hat, image.height, image.width)?;
            let recon = ImageU8::from_tensor(&cropped.map(|v: f32| v.clamp(0.0, 1.0)))?;
            rows.push(EvalRow {
                image: name.clone(),
                rate_index: rate,
                bpp: bpp(bs.total_bytes(), image.width, image.height),
                psnr: psnr(image, &recon)?,
                enc_net_ms,
                entropy_ms,
                dec_net_ms,
            });
        }
    }
    write_eval_report(&out_dir.join(format!("{label}_eval.csv")), &rows, rates)?;
    let curve_points = aggregate_curve(&rows, rates);
    write_rd_curve(
        &out_dir.join(format!("{label}_curve.csv")),
        label,
        &curve_points,
    )?;
    let bd_vs_anchor = match anchor {
        Some(a) => {
            let anchor_curve = crate::report::read_rd_curve(a)?;
            let ours = RDCurve::new(curve_points.clone())?;
            let v = bd_rate(&ours, &anchor_curve)?;
            println!("BD-Rate vs anchor: {v:+.2}%");
            Some(v)
        }
        None => None,
    };
    println!(
        "evaluated {} images x {} rates -> {}",
        corpus.len(),
        rates,
        out_dir.display()
    );
    Ok(EvalOutcome { rows, bd_vs_anchor })
}

pub fn cmd_bdrate(test: &Path, anchor: &Path) -> CliResult<f64> {
    let t = crate::report::read_rd_curve(test)?;
    let a = crate::report::read_rd_curve(anchor)?;
    let v = bd_rate(&t, &a)?;
    println!("{v:.2}");
    Ok(v)
}

/// Build a scalable-encoder bank under one of the four regimes.
#[allow(clippy::too_many_arguments)]
pub fn cmd_rrl(
    config: &Path,
    data: Option<&Path>,
    teacher: &Path,
    regime: &str,
    bank_size: usize,
    student_scheme: &str,
    out: &Path,
    report_out: Option<&Path>,
) -> CliResult<()> {
    let cfg = FullConfig::from_ini(&crate::config::Ini::load(config)?)?;
    let images = load_training_images(&cfg, data)?;
    let shared = io::load_model(teacher)?;
    let scheme: ChannelScheme = crate::config::parse_scheme(student_scheme)?;
    let bank_size = if bank_size == 0 {
        DEFAULT_BANK_SIZE
    } else {
        bank_size
    };

    let bank: EncoderBank<f32> = match regime.to_lowercase().as_str() {
        "separate" => train_separate(&shared, bank_size, scheme, &cfg.train, &images)?,
        "end-to-end" | "e2e" => train_end_to_end(&shared, bank_size, scheme, &cfg.train, &images)?,
        "one-by-one" | "rrl" => {
            let mut bank = EncoderBank::new(shared);
            for i in 0..bank_size {
                let step_cfg = evc_core::train::TrainConfig {
                    seed: cfg.train.seed ^ ((i as u64 + 1) << 8),
                    ..cfg.train.clone()
                };
                train_rrl_step(
                    &mut bank,
                    NewEncoderInit::Scratch {
                        scheme,
                        seed: cfg.model_seed ^ ((i as u64 + 1) * 77),
                    },
                    &step_cfg,
                    &images,
                )?;
                println!("one-by-one: encoder {i} trained");
            }
            bank
        }
        "ours" | "masked" => {
            let mut bank = EncoderBank::new(shared);
            for i in 0..bank_size {
                let step_cfg = evc_core::train::TrainConfig {
                    seed: cfg.train.seed ^ ((i as u64 + 1) << 8),
                    ..cfg.train.clone()
                };
                train_rrl_step(
                    &mut bank,
                    NewEncoderInit::MaskedTeacher {
                        scheme,
                        decay: cfg.decay,
                        epochs_decay: cfg.train.epochs_decay.max(1),
                    },
                    &step_cfg,
                    &images,
                )?;
                println!("masked-teacher: encoder {i} trained");
            }
            bank
        }
        other => {
            return Err(CliError::Usage(format!(
                "--regime `{other}`: use separate, end-to-end, one-by-one, or ours"
            )))
        }
    };
    io::save_bank(out, &bank)?;

    if let Some(p) = report_out {
        let mut report_rows = Vec::new();
        for (idx, img) in images.iter().enumerate() {
            for rate in 0..bank.shared.quant.rate_points() {
                let (_, choice) = ensemble_encode(img, &bank, bank.len(), rate)?;
                report_rows.push((idx, choice));
            }
        }
        std::fs::write(p, ensemble_report_csv(&report_rows))?;
    }
    println!(
        "bank of {} encoders ({regime}) written to {}",
        bank.len(),
        out.display()
    );
    Ok(())
}

/// Relative-improvement table from three curves measured against one anchor.
pub fn cmd_report(
    baseline: &Path,
    ours: &Path,
    teacher: &Path,
    anchor: &Path,
    config_label: &str,
    out: Option<&Path>,
) -> CliResult<String> {
    let anchor_curve = crate::report::read_rd_curve(anchor)?;
    let bd = |p: &Path| -> CliResult<f64> {
        let c = crate::report::read_rd_curve(p)?;
        Ok(bd_rate(&c, &anchor_curve)?)
    };
    let bd_baseline = bd(baseline)?;
    let bd_ours = bd(ours)?;
    let bd_teacher = bd(teacher)?;
    let label = relative_improvement_label(bd_baseline, bd_ours, bd_teacher);
    let mut csv = String::from("config,bd_baseline,bd_ours,bd_teacher,relative_improvement_pct\n");
    csv += &format!(
        "{config_label},{bd_baseline:.4},{bd_ours:.4},{bd_teacher:.4},{}\n",
        label.trim_end_matches('%')
    );
    if let Some(p) = out {
        std::fs::write(p, &csv)?;
    }
    println!("relative improvement: {label}");
    Ok(label)
}

pub fn cmd_gen_corpus(out_dir: &Path, count: usize, size: usize, seed: u64) -> CliResult<()> {
    std::fs::create_dir_all(out_dir)?;
    for (i, img) in synthetic_corpus(count, size, seed).iter().enumerate() {
        io::save_image(&out_dir.join(format!("tex{i:04}.png")), img)?;
    }
    println!("wrote {count} {size}x{size} textures to {}", out_dir.display());
    Ok(())
}
