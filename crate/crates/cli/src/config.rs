//! Sectioned key-value configuration files.
//!
//! ```text
//! [model]
//! enc_scheme = small          # small | medium | large | c1,c2,c3,c4
//! dec_scheme = small
//! latent_channels = 192
//! hyper_channels = 128
//! seed = 1
//!
//! [rates]
//! lambdas = 1300, 650, 325, 162.5
//! q_init = 0.6, 0.95, 1.5, 2.4
//!
//! [train]
//! epochs_total = 30
//! epochs_decay = 9
//! lr = 2e-4
//! lr_milestones = 15, 23
//! lr_factor = 0.5
//! batch_size = 4
//! crop = 32
//! seed = 7
//!
//! [decay]
//! eta = 4e-5
//! loss_kind = ours            # ours | l1 | l2
//! eta_avoid = 4e-4
//! zero_threshold = 1e-3
//!
//! [dataset]
//! dir = ./images
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evc_core::mask::{DecayConfig, SparsityKind};
use evc_core::model::{ChannelScheme, ModelConfig, RatePoint};
use evc_core::train::TrainConfig;

use crate::{CliError, CliResult};

/// Parsed sections: `section -> key -> value`.
#[derive(Debug, Default, Clone)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> CliResult<Ini> {
        let mut out = Ini::default();
        let mut current = String::from("");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    CliError::Data(format!("line {}: unterminated section", lineno + 1))
                })?;
                current = name.trim().to_lowercase();
                out.sections.entry(current.clone()).or_default();
            } else if let Some((k, v)) = line.split_once('=') {
                out.sections
                    .entry(current.clone())
                    .or_default()
                    .insert(k.trim().to_lowercase(), v.trim().to_string());
            } else {
                return Err(CliError::Data(format!(
                    "line {}: expected `key = value`",
                    lineno + 1
                )));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> CliResult<Ini> {
        Ini::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|s| s.as_str())
    }

    fn parse_val<T: std::str::FromStr>(&self, section: &str, key: &str) -> CliResult<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                CliError::Data(format!("[{section}] {key}: cannot parse `{v}`"))
            }),
        }
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str) -> CliResult<Option<Vec<T>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|_| {
                        CliError::Data(format!("[{section}] {key}: cannot parse `{item}`"))
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }
}

pub fn parse_scheme(text: &str) -> CliResult<ChannelScheme> {
    match text.to_lowercase().as_str() {
        "small" | "s" => Ok(ChannelScheme::small()),
        "medium" | "m" => Ok(ChannelScheme::medium()),
        "large" | "l" => Ok(ChannelScheme::large()),
        other => {
            let parts: Vec<usize> = other
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    CliError::Usage(format!(
                        "scheme `{text}` is not small/medium/large or four comma-separated widths"
                    ))
                })?;
            if parts.len() != 4 {
                return Err(CliError::Usage("a scheme needs four widths".into()));
            }
            Ok(ChannelScheme::new(parts[0], parts[1], parts[2], parts[3]))
        }
    }
}

/// Everything a training-side command needs.
#[derive(Debug, Clone)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub rate_points: Vec<RatePoint>,
    pub train: TrainConfig,
    pub decay: DecayConfig,
    pub dataset_dir: Option<PathBuf>,
}

impl FullConfig {
    pub fn from_ini(ini: &Ini) -> CliResult<FullConfig> {
        let enc = match ini.get("model", "enc_scheme") {
            Some(s) => parse_scheme(s)?,
            None => ChannelScheme::large(),
        };
        let dec = match ini.get("model", "dec_scheme") {
            Some(s) => parse_scheme(s)?,
            None => ChannelScheme::large(),
        };
        let latent = ini.parse_val("model", "latent_channels")?.unwrap_or(192);
        let hyper = ini.parse_val("model", "hyper_channels")?.unwrap_or(128);
        let stages = ini.parse_val("model", "stages")?.unwrap_or(4);
        let model_seed = ini.parse_val("model", "seed")?.unwrap_or(1);
        let model = ModelConfig::new(enc, dec, latent, hyper).with_stages(stages);

        let lambdas: Vec<f64> = ini
            .list("rates", "lambdas")?
            .unwrap_or_else(|| vec![1300.0, 650.0, 325.0, 162.5]);
        let q_init: Vec<f64> = ini
            .list("rates", "q_init")?
            .unwrap_or_else(|| vec![0.6, 0.95, 1.5, 2.4]);
        if lambdas.len() != q_init.len() || lambdas.is_empty() {
            return Err(CliError::Data(
                "[rates] lambdas and q_init need matching non-empty lengths".into(),
            ));
        }
        let rate_points = lambdas
            .iter()
            .zip(&q_init)
            .map(|(&lambda, &q)| RatePoint {
                lambda,
                q_global_init: q,
            })
            .collect();

        let train = TrainConfig {
            epochs_total: ini.parse_val("train", "epochs_total")?.unwrap_or(30),
            epochs_decay: ini.parse_val("train", "epochs_decay")?.unwrap_or(0),
            lr: ini.parse_val("train", "lr")?.unwrap_or(2e-4),
            lr_milestones: ini.list("train", "lr_milestones")?.unwrap_or_default(),
            lr_factor: ini.parse_val("train", "lr_factor")?.unwrap_or(0.5),
            batch_size: ini.parse_val("train", "batch_size")?.unwrap_or(4),
            crop: ini.parse_val("train", "crop")?.unwrap_or(32),
            seed: ini.parse_val("train", "seed")?.unwrap_or(7),
            iters_per_epoch: ini.parse_val("train", "iters_per_epoch")?,
        };

        let eta = ini.parse_val("decay", "eta")?.unwrap_or(4e-5);
        let kind = match ini.get("decay", "loss_kind").unwrap_or("ours") {
            "ours" => SparsityKind::Ours,
            "l1" => SparsityKind::L1,
            "l2" => SparsityKind::L2,
            other => {
                return Err(CliError::Data(format!(
                    "[decay] loss_kind `{other}` is not ours/l1/l2"
                )))
            }
        };
        let mut decay = DecayConfig::new(eta, kind);
        if let Some(ea) = ini.parse_val("decay", "eta_avoid")? {
            decay = decay.with_eta_avoid(ea);
        }
        if let Some(tau) = ini.parse_val("decay", "zero_threshold")? {
            decay.zero_threshold = tau;
        }

        let dataset_dir = ini.get("dataset", "dir").map(PathBuf::from);

        Ok(FullConfig {
            model,
            model_seed,
            rate_points,
            train,
            decay,
            dataset_dir,
        })
    }
}
