//! Command-line entry points: train, eval, analyze, transfer.
//!
//! Run configuration lives in a plain-text file of `key = value` lines
//! under `[section]` headers. Unknown sections or keys are errors, so
//! typos never pass silently; all paths are resolved relative to the
//! config file. Every command echoes its effective configuration (all
//! defaults materialized) before doing work, and training/analysis also
//! save it next to their outputs.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/config/format error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis;
use crate::attacks::{AttackConfig, EvalAttack, InnerLoss};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::lfrc::{MetricKind, DEFAULT_EPS_NORM};
use crate::models::{ArchKind, ModelSpec};
use crate::rng::SplitMix64;
use crate::tensor::Element;
use crate::trainer::{self, TrainConfig};

// ---- config file parsing ----

#[derive(Debug)]
struct Section {
    entries: Vec<(String, String, usize)>, // key, value, line number
}

#[derive(Debug)]
pub struct ConfigFile {
    path: PathBuf,
    base_dir: PathBuf,
    sections: Vec<(String, Section)>,
}

impl ConfigFile {
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::format(path.display().to_string(), format!("cannot read config: {e}"))
        })?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut sections: Vec<(String, Section)> = Vec::new();
        let mut current: Option<usize> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim().to_string();
                if sections.iter().any(|(n, _)| n == &name) {
                    return Err(Error::format(
                        format!("{} line {}", path.display(), lineno),
                        format!("duplicate section [{name}]"),
                    ));
                }
                sections.push((name, Section { entries: vec![] }));
                current = Some(sections.len() - 1);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(
                    format!("{} line {}", path.display(), lineno),
                    "expected key = value",
                )
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let Some(cur) = current else {
                return Err(Error::format(
                    format!("{} line {}", path.display(), lineno),
                    "key outside any [section]",
                ));
            };
            let section = &mut sections[cur].1;
            if section.entries.iter().any(|(k, _, _)| k == &key) {
                return Err(Error::format(
                    format!("{} line {}", path.display(), lineno),
                    format!("duplicate key {key:?}"),
                ));
            }
            section.entries.push((key, value, lineno));
        }
        Ok(ConfigFile {
            path: path.to_path_buf(),
            base_dir,
            sections,
        })
    }

    fn reader(&self, name: &str) -> Option<KeyReader> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| KeyReader {
            file: self.path.display().to_string(),
            section: name.to_string(),
            remaining: s.entries.clone(),
        })
    }

    fn require(&self, name: &str) -> Result<KeyReader> {
        self.reader(name).ok_or_else(|| {
            Error::format(
                self.path.display().to_string(),
                format!("missing [{name}] section"),
            )
        })
    }

    fn known_sections(&self, allowed: &[&str]) -> Result<()> {
        for (name, _) in &self.sections {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::format(
                    self.path.display().to_string(),
                    format!("unknown section [{name}]"),
                ));
            }
        }
        Ok(())
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Strict key consumer: every key must be taken, leftovers are errors.
struct KeyReader {
    file: String,
    section: String,
    remaining: Vec<(String, String, usize)>,
}

impl KeyReader {
    fn take(&mut self, key: &str) -> Option<String> {
        let idx = self.remaining.iter().position(|(k, _, _)| k == key)?;
        Some(self.remaining.remove(idx).1)
    }

    fn loc(&self, key: &str) -> String {
        format!("{} [{}] {}", self.file, self.section, key)
    }

    fn take_required(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::format(self.loc(key), "missing required key"))
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::format(self.loc(key), format!("bad value {v:?}: {e}"))),
        }
    }

    fn take_parsed_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take_parsed(key)?.unwrap_or(default))
    }

    fn finish(self) -> Result<()> {
        if let Some((k, _, line)) = self.remaining.first() {
            return Err(Error::format(
                format!("{} line {}", self.file, line),
                format!("unknown key {k:?} in [{}]", self.section),
            ));
        }
        Ok(())
    }
}

fn parse_usize_list(loc: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::format(loc.to_string(), format!("bad integer {s:?}: {e}")))
        })
        .collect()
}

fn parse_range(loc: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::format(loc.to_string(), "expected lo,hi"));
    }
    let parse = |s: &str| -> Result<f64> {
        match s {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => other
                .parse::<f64>()
                .map_err(|e| Error::format(loc.to_string(), format!("bad number {other:?}: {e}"))),
        }
    };
    Ok((parse(parts[0])?, parse(parts[1])?))
}

fn render_range(range: (f64, f64)) -> String {
    let r = |v: f64| {
        if v == f64::INFINITY {
            "inf".to_string()
        } else if v == f64::NEG_INFINITY {
            "-inf".to_string()
        } else {
            format!("{v}")
        }
    };
    format!("{},{}", r(range.0), r(range.1))
}

// ---- data configuration ----

/// Dataset source materialized from a `[data]` section.
#[derive(Debug, Clone)]
pub enum DataConfig {
    Gaussians {
        classes: usize,
        n_train_per_class: usize,
        n_test_per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    },
    GaussianImages {
        classes: usize,
        n_train_per_class: usize,
        n_test_per_class: usize,
        channels: usize,
        height: usize,
        width: usize,
        contrast: f64,
        noise: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv { train: PathBuf, test: PathBuf },
}

impl DataConfig {
    fn from_section(cfg: &ConfigFile) -> Result<Self> {
        let mut r = cfg.require("data")?;
        let kind = r.take_required("kind")?;
        let out = match kind.as_str() {
            "gaussians" => DataConfig::Gaussians {
                classes: r.take_parsed_or("classes", 2)?,
                n_train_per_class: r
                    .take_parsed("n_train_per_class")?
                    .ok_or_else(|| Error::format(r.loc("n_train_per_class"), "required"))?,
                n_test_per_class: r
                    .take_parsed("n_test_per_class")?
                    .ok_or_else(|| Error::format(r.loc("n_test_per_class"), "required"))?,
                dim: r.take_parsed_or("dim", 2)?,
                separation: r
                    .take_parsed("separation")?
                    .ok_or_else(|| Error::format(r.loc("separation"), "required"))?,
                seed: r.take_parsed_or("seed", 0)?,
            },
            "gaussian-images" => DataConfig::GaussianImages {
                classes: r.take_parsed_or("classes", 4)?,
                n_train_per_class: r
                    .take_parsed("n_train_per_class")?
                    .ok_or_else(|| Error::format(r.loc("n_train_per_class"), "required"))?,
                n_test_per_class: r
                    .take_parsed("n_test_per_class")?
                    .ok_or_else(|| Error::format(r.loc("n_test_per_class"), "required"))?,
                channels: r.take_parsed_or("channels", 1)?,
                height: r.take_parsed_or("height", 28)?,
                width: r.take_parsed_or("width", 28)?,
                contrast: r.take_parsed_or("contrast", 0.2)?,
                noise: r.take_parsed_or("noise", 0.25)?,
                seed: r.take_parsed_or("seed", 0)?,
            },
            "idx" => DataConfig::Idx {
                train_images: cfg.resolve(&r.take_required("train_images")?),
                train_labels: cfg.resolve(&r.take_required("train_labels")?),
                test_images: cfg.resolve(&r.take_required("test_images")?),
                test_labels: cfg.resolve(&r.take_required("test_labels")?),
            },
            "csv" => DataConfig::Csv {
                train: cfg.resolve(&r.take_required("train")?),
                test: cfg.resolve(&r.take_required("test")?),
            },
            other => {
                return Err(Error::format(
                    r.loc("kind"),
                    format!("unknown dataset kind {other:?}"),
                ))
            }
        };
        r.finish()?;
        Ok(out)
    }

    /// Parse only the `[data]` section of a config file. Other sections
    /// may be present (the same file can drive training) and are ignored.
    pub fn from_config_file(path: &Path) -> Result<Self> {
        let cfg = ConfigFile::parse(path)?;
        Self::from_section(&cfg)
    }

    /// Image-like data lives in [0,1] and gets the standard attack defaults.
    pub fn is_image(&self) -> bool {
        matches!(self, DataConfig::GaussianImages { .. } | DataConfig::Idx { .. })
    }

    pub fn load<E: Element>(&self) -> Result<(Dataset<E>, Dataset<E>)> {
        match self {
            DataConfig::Gaussians {
                classes,
                n_train_per_class,
                n_test_per_class,
                dim,
                separation,
                seed,
            } => {
                let train = data::synthetic_gaussians(
                    *classes,
                    *n_train_per_class,
                    *dim,
                    *separation,
                    *seed,
                )?;
                let test = data::synthetic_gaussians(
                    *classes,
                    *n_test_per_class,
                    *dim,
                    *separation,
                    seed.wrapping_add(1),
                )?;
                Ok((train, test))
            }
            DataConfig::GaussianImages {
                classes,
                n_train_per_class,
                n_test_per_class,
                channels,
                height,
                width,
                contrast,
                noise,
                seed,
            } => {
                data::synthetic_gaussian_images_split(
                    *classes,
                    *n_train_per_class,
                    *n_test_per_class,
                    *channels,
                    *height,
                    *width,
                    *contrast,
                    *noise,
                    *seed,
                )
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let mut train = data::load_idx(train_images, train_labels)?;
                let mut test = data::load_idx(test_images, test_labels)?;
                let k = train.classes.max(test.classes);
                train.classes = k;
                test.classes = k;
                Ok((train, test))
            }
            DataConfig::Csv { train, test } => {
                let mut train_ds = data::load_csv(train)?;
                let mut test_ds = data::load_csv(test)?;
                let k = train_ds.classes.max(test_ds.classes);
                train_ds.classes = k;
                test_ds.classes = k;
                Ok((train_ds, test_ds))
            }
        }
    }

    fn render(&self) -> String {
        match self {
            DataConfig::Gaussians {
                classes,
                n_train_per_class,
                n_test_per_class,
                dim,
                separation,
                seed,
            } => format!(
                "kind = gaussians\nclasses = {classes}\nn_train_per_class = {n_train_per_class}\n\
                 n_test_per_class = {n_test_per_class}\ndim = {dim}\nseparation = {separation}\nseed = {seed}\n"
            ),
            DataConfig::GaussianImages {
                classes,
                n_train_per_class,
                n_test_per_class,
                channels,
                height,
                width,
                contrast,
                noise,
                seed,
            } => format!(
                "kind = gaussian-images\nclasses = {classes}\nn_train_per_class = {n_train_per_class}\n\
                 n_test_per_class = {n_test_per_class}\nchannels = {channels}\nheight = {height}\n\
                 width = {width}\ncontrast = {contrast}\nnoise = {noise}\nseed = {seed}\n"
            ),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => format!(
                "kind = idx\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n",
                train_images.display(),
                train_labels.display(),
                test_images.display(),
                test_labels.display()
            ),
            DataConfig::Csv { train, test } => format!(
                "kind = csv\ntrain = {}\ntest = {}\n",
                train.display(),
                test.display()
            ),
        }
    }
}

// ---- run configuration ----

/// A fully materialized training run.
#[derive(Debug)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
    pub precision: String,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg = ConfigFile::parse(path)?;
        cfg.known_sections(&["model", "train", "attack", "val_attack", "data", "output"])?;

        let data_cfg = DataConfig::from_section(&cfg)?;
        let image = data_cfg.is_image();

        // [model]
        let mut m = cfg.require("model")?;
        let arch_name = m.take_required("arch")?;
        let input_shape = {
            let v = m.take_required("input_shape")?;
            parse_usize_list(&m.loc("input_shape"), &v)?
        };
        let classes: usize = m
            .take_parsed("classes")?
            .ok_or_else(|| Error::format(m.loc("classes"), "required"))?;
        let arch = match arch_name.as_str() {
            "mlp" => {
                let hidden = m.take_required("hidden")?;
                ArchKind::Mlp {
                    hidden: parse_usize_list(&m.loc("hidden"), &hidden)?,
                }
            }
            "mini-resnet" => {
                let channels = match m.take("channels") {
                    Some(v) => parse_usize_list(&m.loc("channels"), &v)?,
                    None => vec![8, 16, 32, 64],
                };
                ArchKind::MiniResNet { channels }
            }
            other => {
                return Err(Error::format(
                    m.loc("arch"),
                    format!("unknown arch {other:?}"),
                ))
            }
        };
        let mut spec = ModelSpec {
            arch,
            input_shape,
            classes,
            tap_points: vec![],
            tap_after_activation: m.take_parsed_or("tap_after_activation", true)?,
        };
        spec.tap_points = match m.take("taps") {
            Some(v) => v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().to_string())
                .collect(),
            None => spec.block_names().last().cloned().into_iter().collect(),
        };
        m.finish()?;
        spec.validate()?;

        // [attack]
        let default_range = if image {
            (0.0, 1.0)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        let attack = {
            let mut a = cfg.require("attack")?;
            let attack = read_attack_keys(&mut a, image, default_range, 10)?;
            a.finish()?;
            attack
        };

        // [val_attack] defaults to the training attack at 10 iterations
        let val_attack = match cfg.reader("val_attack") {
            None => {
                let mut v = attack.clone();
                v.iterations = 10;
                v.inner_loss = InnerLoss::CrossEntropy;
                v
            }
            Some(mut v) => {
                let mut base = attack.clone();
                base.iterations = 10;
                if let Some(eps) = v.take_parsed::<f64>("eps")? {
                    base.epsilon = eps;
                }
                if let Some(step) = v.take_parsed::<f64>("step")? {
                    base.step_size = step;
                }
                if let Some(iters) = v.take_parsed::<usize>("iters")? {
                    base.iterations = iters;
                }
                if let Some(rs) = v.take_parsed::<bool>("random_start")? {
                    base.random_start = rs;
                }
                if let Some(loss) = v.take("loss") {
                    base.inner_loss = parse_loss(&v.loc("loss"), &loss)?;
                }
                if let Some(range) = v.take("range") {
                    base.data_range = parse_range(&v.loc("range"), &range)?;
                }
                v.finish()?;
                base
            }
        };

        // [train]
        let mut t = cfg.require("train")?;
        let epochs: usize = t
            .take_parsed("epochs")?
            .ok_or_else(|| Error::format(t.loc("epochs"), "required"))?;
        let batch_size: usize = t
            .take_parsed("batch_size")?
            .ok_or_else(|| Error::format(t.loc("batch_size"), "required"))?;
        let lr: f64 = t
            .take_parsed("lr")?
            .ok_or_else(|| Error::format(t.loc("lr"), "required"))?;
        let precision = t.take("precision").unwrap_or_else(|| "f32".to_string());
        if precision != "f32" && precision != "f64" {
            return Err(Error::format(
                t.loc("precision"),
                format!("unknown precision {precision:?}, expected f32|f64"),
            ));
        }
        let metric = match t.take("metric") {
            Some(v) => MetricKind::parse(&v)?,
            None => MetricKind::Exp,
        };
        let milestones = match t.take("milestones") {
            Some(v) => Some(parse_usize_list(&t.loc("milestones"), &v)?),
            None => None,
        };
        let train = TrainConfig {
            epochs,
            batch_size,
            lr,
            lr_milestones: milestones,
            lr_decay: t.take_parsed_or("lr_decay", 0.1)?,
            momentum: t.take_parsed_or("momentum", 0.9)?,
            weight_decay: t.take_parsed_or("weight_decay", 2e-4)?,
            lambda: t.take_parsed_or("lambda", 100.0)?,
            metric,
            eps_norm: t.take_parsed_or("eps_norm", DEFAULT_EPS_NORM)?,
            tap_points: vec![],
            attack,
            val_attack,
            seed: t.take_parsed_or("seed", 0)?,
            augment: t.take_parsed_or("augment", false)?,
            stop_natural_gradient: t.take_parsed_or("stop_natural_gradient", false)?,
            disable_lfrc_branch: t.take_parsed_or("disable_lfrc", false)?,
        };
        t.finish()?;
        train.validate()?;

        // [output]
        let mut o = cfg.require("output")?;
        let out_dir = cfg.resolve(&o.take_required("dir")?);
        o.finish()?;

        Ok(RunConfig {
            spec,
            train,
            data: data_cfg,
            out_dir,
            precision,
        })
    }

    /// Render every effective value; reparsing this text reproduces the run.
    pub fn render_effective(&self) -> String {
        let spec_ini = {
            let mut s = String::new();
            for line in self.spec.to_config_string().lines() {
                let (k, v) = line.split_once('=').expect("canonical spec is key=value");
                s.push_str(&format!("{k} = {v}\n"));
            }
            s
        };
        let t = &self.train;
        let attack_ini = render_attack(&t.attack);
        let val_ini = render_attack(&t.val_attack);
        format!(
            "[model]\n{spec_ini}\n[train]\nprecision = {}\nepochs = {}\nbatch_size = {}\nlr = {}\n\
             milestones = {}\nlr_decay = {}\nmomentum = {}\nweight_decay = {}\nlambda = {}\n\
             metric = {}\neps_norm = {}\nseed = {}\naugment = {}\nstop_natural_gradient = {}\n\
             disable_lfrc = {}\n\n[attack]\n{attack_ini}\n[val_attack]\n{val_ini}\n[data]\n{}\n[output]\ndir = {}\n",
            self.precision,
            t.epochs,
            t.batch_size,
            t.lr,
            trainer::milestones(t)
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
            t.lr_decay,
            t.momentum,
            t.weight_decay,
            t.lambda,
            t.metric.name(),
            t.eps_norm,
            t.seed,
            t.augment,
            t.stop_natural_gradient,
            t.disable_lfrc_branch,
            self.data.render(),
            self.out_dir.display(),
        )
    }
}

fn parse_loss(loc: &str, value: &str) -> Result<InnerLoss> {
    match value {
        "ce" => Ok(InnerLoss::CrossEntropy),
        "cw" => Ok(InnerLoss::CwMargin),
        other => Err(Error::format(
            loc.to_string(),
            format!("unknown loss {other:?}, expected ce|cw"),
        )),
    }
}

fn read_attack_keys(
    r: &mut KeyReader,
    image: bool,
    default_range: (f64, f64),
    default_iters: usize,
) -> Result<AttackConfig> {
    let epsilon = match r.take_parsed::<f64>("eps")? {
        Some(v) => v,
        None if image => 8.0 / 255.0,
        None => {
            return Err(Error::format(
                r.loc("eps"),
                "required for non-image data (no natural scale to default to)",
            ))
        }
    };
    let step_size = match r.take_parsed::<f64>("step")? {
        Some(v) => v,
        None if image => 2.0 / 255.0,
        None => {
            return Err(Error::format(
                r.loc("step"),
                "required for non-image data (no natural scale to default to)",
            ))
        }
    };
    let iterations = r.take_parsed_or("iters", default_iters)?;
    let random_start = r.take_parsed_or("random_start", true)?;
    let inner_loss = match r.take("loss") {
        Some(v) => parse_loss(&r.loc("loss"), &v)?,
        None => InnerLoss::CrossEntropy,
    };
    let data_range = match r.take("range") {
        Some(v) => parse_range(&r.loc("range"), &v)?,
        None => default_range,
    };
    let cfg = AttackConfig {
        epsilon,
        step_size,
        iterations,
        random_start,
        inner_loss,
        data_range,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn render_attack(a: &AttackConfig) -> String {
    format!(
        "eps = {}\nstep = {}\niters = {}\nrandom_start = {}\nloss = {}\nrange = {}\n",
        a.epsilon,
        a.step_size,
        a.iterations,
        a.random_start,
        match a.inner_loss {
            InnerLoss::CrossEntropy => "ce",
            InnerLoss::CwMargin => "cw",
        },
        render_range(a.data_range),
    )
}

// ---- command-line interface ----

#[derive(Parser, Debug)]
#[command(
    name = "lfrc-lab",
    about = "Adversarial training with latent-feature relation consistency",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint under white-box attacks.
    Eval(EvalArgs),
    /// Export similarity heatmaps and the difference/accuracy scatter.
    Analyze(AnalyzeArgs),
    /// Transfer attack: craft on a surrogate, evaluate on a target.
    Transfer(TransferArgs),
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Run config file ([model], [train], [attack], [data], [output]).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the consistency weight lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override tap points (repeatable).
    #[arg(long = "tap")]
    taps: Vec<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AttackArg {
    None,
    Fgsm,
    Pgd,
    Cw,
}

#[derive(clap::Args, Debug)]
struct AttackFlags {
    /// Attack to evaluate under.
    #[arg(long, value_enum, default_value = "pgd")]
    attack: AttackArg,
    /// L-infinity budget (default 8/255 for image data).
    #[arg(long)]
    eps: Option<f64>,
    /// Step size (default 2/255 for image data).
    #[arg(long)]
    step: Option<f64>,
    /// Attack iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Random start for PGD-style attacks.
    #[arg(long)]
    random_start: Option<bool>,
    /// Data range as lo,hi (defaults to 0,1 for image data).
    #[arg(long)]
    range: Option<String>,
}

impl AttackFlags {
    fn build(&self, image: bool) -> Result<EvalAttack> {
        let default_range = if image {
            (0.0, 1.0)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        let range = match &self.range {
            Some(v) => parse_range("--range", v)?,
            None => default_range,
        };
        if matches!(self.attack, AttackArg::None) {
            return Ok(EvalAttack::Identity);
        }
        let eps = match self.eps {
            Some(v) => v,
            None if image => 8.0 / 255.0,
            None => {
                return Err(Error::InvalidConfig(
                    "--eps is required for non-image data".into(),
                ))
            }
        };
        match self.attack {
            AttackArg::Fgsm => Ok(EvalAttack::Fgsm {
                epsilon: eps,
                range,
            }),
            AttackArg::Pgd | AttackArg::Cw => {
                let step = match self.step {
                    Some(v) => v,
                    None if image => 2.0 / 255.0,
                    None => {
                        return Err(Error::InvalidConfig(
                            "--step is required for non-image data".into(),
                        ))
                    }
                };
                let cfg = AttackConfig {
                    epsilon: eps,
                    step_size: step,
                    iterations: self.iters.unwrap_or(20),
                    random_start: self.random_start.unwrap_or(true),
                    inner_loss: if matches!(self.attack, AttackArg::Cw) {
                        InnerLoss::CwMargin
                    } else {
                        InnerLoss::CrossEntropy
                    },
                    data_range: range,
                };
                cfg.validate()?;
                Ok(EvalAttack::Pgd(cfg))
            }
            AttackArg::None => unreachable!("handled above"),
        }
    }
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config file whose [data] section describes the dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Which split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    attack: AttackFlags,
    /// Evaluation batch size.
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Seed for attack randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the accuracy CSV.
    #[arg(long, default_value = "eval_results.csv")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Batch size of each similarity matrix.
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Tap to analyze (defaults to the model's last tap).
    #[arg(long)]
    tap: Option<String>,
    /// Output directory for heatmaps and the scatter CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct TransferArgs {
    /// Surrogate checkpoint: adversarial examples are crafted on it.
    #[arg(long)]
    surrogate: PathBuf,
    /// Target checkpoint the examples are transferred to.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Transfer(args) => cmd_transfer(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => 4,
                _ => 3,
            }
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut rc = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        rc.train.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        if lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        rc.train.lambda = lambda;
    }
    if !args.taps.is_empty() {
        rc.spec.tap_points = args.taps.clone();
        rc.spec.validate()?;
    }
    if let Some(out) = args.out {
        rc.out_dir = out;
    }
    let banner = rc.render_effective();
    print!("{banner}");
    match rc.precision.as_str() {
        "f32" => run_train::<f32>(&rc, &banner),
        _ => run_train::<f64>(&rc, &banner),
    }
}

fn run_train<E: Element>(rc: &RunConfig, banner: &str) -> Result<()> {
    let (train_ds, val_ds) = rc.data.load::<E>()?;
    let output = trainer::train::<E>(&rc.spec, &rc.train, &train_ds, &val_ds)?;
    std::fs::create_dir_all(&rc.out_dir)?;
    std::fs::write(rc.out_dir.join("effective_config.ini"), banner)?;
    std::fs::write(
        rc.out_dir.join("history.csv"),
        trainer::history_to_csv(&output.history),
    )?;
    data::save_checkpoint(&output.best, &rc.out_dir.join("best.ckpt"))?;
    data::save_checkpoint(&output.last, &rc.out_dir.join("last.ckpt"))?;
    println!("checkpoint\tepoch\tval_robust_acc");
    println!(
        "best\t{}\t{}",
        output.best.epoch,
        analysis::format_sig12(output.best.selection_value)
    );
    println!(
        "last\t{}\t{}",
        output.last.epoch,
        analysis::format_sig12(output.last.selection_value)
    );
    println!("outputs written to {}", rc.out_dir.display());
    Ok(())
}

fn pick_split<E: Element>(
    data_cfg: &DataConfig,
    split: SplitArg,
) -> Result<Dataset<E>> {
    let (train, test) = data_cfg.load::<E>()?;
    Ok(match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = data::load_checkpoint(&args.checkpoint)?;
    match ckpt.precision.as_str() {
        "f32" => run_eval::<f32>(&args, &ckpt),
        _ => run_eval::<f64>(&args, &ckpt),
    }
}

fn run_eval<E: Element>(args: &EvalArgs, ckpt: &trainer::Checkpoint) -> Result<()> {
    let model = ckpt.instantiate::<E>()?;
    let data_cfg = DataConfig::from_config_file(&args.dataset)?;
    let dataset = pick_split::<E>(&data_cfg, args.split)?;
    let attack = args.attack.build(data_cfg.is_image())?;

    let banner = format!(
        "# command = eval\n# checkpoint = {}\n# checkpoint_kind = {}\n# checkpoint_epoch = {}\n\
         # dataset = {}\n# split = {:?}\n# attack = {}\n# batch_size = {}\n# seed = {}\n",
        args.checkpoint.display(),
        ckpt.kind.name(),
        ckpt.epoch,
        args.dataset.display(),
        args.split,
        attack.describe(),
        args.batch_size,
        args.seed,
    );
    print!("{banner}");

    let mut rng = SplitMix64::derive(args.seed, &[0xe7a1]);
    let clean = analysis::robust_accuracy(
        &model,
        &dataset,
        &EvalAttack::Identity,
        args.batch_size,
        &mut rng,
    )?;
    let mut rows = vec![("none".to_string(), 0.0, 0.0, 0usize, clean)];
    if !matches!(attack, EvalAttack::Identity) {
        let mut rng = SplitMix64::derive(args.seed, &[0xe7a2]);
        let acc =
            analysis::robust_accuracy(&model, &dataset, &attack, args.batch_size, &mut rng)?;
        let (name, eps, step, iters) = match &attack {
            EvalAttack::Fgsm { epsilon, .. } => ("fgsm".to_string(), *epsilon, 0.0, 1),
            EvalAttack::Pgd(cfg) => (
                match cfg.inner_loss {
                    InnerLoss::CrossEntropy => "pgd".to_string(),
                    InnerLoss::CwMargin => "cw".to_string(),
                },
                cfg.epsilon,
                cfg.step_size,
                cfg.iterations,
            ),
            EvalAttack::Identity => unreachable!(),
        };
        rows.push((name, eps, step, iters, acc));
    }

    println!("attack\taccuracy");
    for (name, _, _, _, acc) in &rows {
        println!("{name}\t{}", analysis::format_sig12(*acc));
    }

    let mut csv = banner
        .lines()
        .map(|l| format!("{l}\n"))
        .collect::<String>();
    csv.push_str("attack,epsilon,step_size,iterations,accuracy\n");
    for (name, eps, step, iters, acc) in &rows {
        csv.push_str(&format!(
            "{name},{},{},{iters},{}\n",
            analysis::format_sig12(*eps),
            analysis::format_sig12(*step),
            analysis::format_sig12(*acc)
        ));
    }
    std::fs::write(&args.out, csv)?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let ckpt = data::load_checkpoint(&args.checkpoint)?;
    match ckpt.precision.as_str() {
        "f32" => run_analyze::<f32>(&args, &ckpt),
        _ => run_analyze::<f64>(&args, &ckpt),
    }
}

fn run_analyze<E: Element>(args: &AnalyzeArgs, ckpt: &trainer::Checkpoint) -> Result<()> {
    let model = ckpt.instantiate::<E>()?;
    let data_cfg = DataConfig::from_config_file(&args.dataset)?;
    let dataset = pick_split::<E>(&data_cfg, args.split)?;
    let attack = args.attack.build(data_cfg.is_image())?;
    let tap = match &args.tap {
        Some(t) => t.clone(),
        None => model
            .spec()
            .tap_points
            .last()
            .cloned()
            .ok_or_else(|| Error::InvalidConfig("model declares no tap points".into()))?,
    };

    let banner = format!(
        "# command = analyze\n# checkpoint = {}\n# dataset = {}\n# split = {:?}\n# tap = {}\n\
         # attack = {}\n# batch_size = {}\n# seed = {}\n",
        args.checkpoint.display(),
        args.dataset.display(),
        args.split,
        tap,
        attack.describe(),
        args.batch_size,
        args.seed,
    );
    print!("{banner}");

    let mut rng = SplitMix64::derive(args.seed, &[0xa7a1]);
    let batches = analysis::ds_da_scatter(
        &model,
        &dataset,
        &attack,
        args.batch_size,
        &tap,
        DEFAULT_EPS_NORM,
        &mut rng,
    )?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("effective_config.txt"), &banner)?;
    for batch in &batches {
        let idx = batch.diagnostic.batch_index;
        analysis::export_heatmap(
            &batch.natural,
            &args.out.join(format!("batch{idx:03}_natural")),
        )?;
        analysis::export_heatmap(
            &batch.adversarial,
            &args.out.join(format!("batch{idx:03}_adversarial")),
        )?;
    }
    let diags: Vec<analysis::BatchDiagnostic> =
        batches.iter().map(|b| b.diagnostic.clone()).collect();
    let scatter = analysis::scatter_to_csv(&diags);
    std::fs::write(args.out.join("scatter.csv"), &scatter)?;

    println!("batch_index\tds\tda");
    for d in &diags {
        println!("{}\t{}\t{}", d.batch_index, analysis::format_sig12(d.ds), d.da);
    }
    for line in scatter.lines().filter(|l| l.starts_with('#')) {
        println!("{line}");
    }
    println!("outputs written to {}", args.out.display());
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let surrogate = data::load_checkpoint(&args.surrogate)?;
    let target = data::load_checkpoint(&args.target)?;
    if surrogate.precision != target.precision {
        return Err(Error::Incompatible(format!(
            "surrogate precision {} differs from target {}",
            surrogate.precision, target.precision
        )));
    }
    match surrogate.precision.as_str() {
        "f32" => run_transfer::<f32>(&args, &surrogate, &target),
        _ => run_transfer::<f64>(&args, &surrogate, &target),
    }
}

fn run_transfer<E: Element>(
    args: &TransferArgs,
    surrogate_ckpt: &trainer::Checkpoint,
    target_ckpt: &trainer::Checkpoint,
) -> Result<()> {
    let surrogate = surrogate_ckpt.instantiate::<E>()?;
    let target = target_ckpt.instantiate::<E>()?;
    let data_cfg = DataConfig::from_config_file(&args.dataset)?;
    let dataset = pick_split::<E>(&data_cfg, args.split)?;
    let attack = args.attack.build(data_cfg.is_image())?;

    let banner = format!(
        "# command = transfer\n# surrogate = {}\n# target = {}\n# dataset = {}\n# split = {:?}\n\
         # attack = {}\n# batch_size = {}\n# seed = {}\n",
        args.surrogate.display(),
        args.target.display(),
        args.dataset.display(),
        args.split,
        attack.describe(),
        args.batch_size,
        args.seed,
    );
    print!("{banner}");

    let mut rng = SplitMix64::derive(args.seed, &[0x77a1]);
    let acc = analysis::transfer_eval(
        &surrogate,
        &target,
        &dataset,
        &attack,
        args.batch_size,
        &mut rng,
    )?;
    println!("metric\tvalue");
    println!("transfer_robust_accuracy\t{}", analysis::format_sig12(acc));
    Ok(())
}
