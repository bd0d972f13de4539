//! Flat `key = value` run configuration. Every model and training field has
//! a key; later assignments win, so flags applied after the file override it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vitrm::data::CifarVariant;
use vitrm::model::ModelConfig;
use vitrm::train::TrainConfig;
use vitrm::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub dataset: CifarVariant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train on the first `subset` images of a seeded shuffle of the training split.
    pub subset: Option<usize>,
    /// Validate on the first `val_subset` test images.
    pub val_subset: Option<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            dataset: CifarVariant::Cifar10,
            model: ModelConfig::cifar10(),
            train: TrainConfig::default(),
            subset: None,
            val_subset: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>, Error> {
    match value {
        "none" | "all" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl Settings {
    /// Assigns one field by key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let (m, t) = (&mut self.model, &mut self.train);
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "dataset" => {
                self.dataset = v.parse()?;
                m.num_classes = self.dataset.num_classes();
            }
            "subset" => self.subset = parse_opt(key, v)?,
            "val_subset" => self.val_subset = parse_opt(key, v)?,

            "image_h" => m.image_h = parse(key, v)?,
            "image_w" => m.image_w = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "patch" => m.patch = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "latent_tokens" => m.latent_tokens = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "ffn_hidden" => m.ffn_hidden = parse(key, v)?,
            "block_depth" => m.block_depth = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "recursions" => m.recursions = parse(key, v)?,
            "latent_steps" => m.latent_steps = parse(key, v)?,
            "supervision_steps" => m.supervision_steps = parse(key, v)?,
            "halt_threshold" => m.halt_threshold = parse(key, v)?,
            "ln_eps" => m.ln_eps = parse(key, v)?,

            "lr_max" => t.lr_max = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "ema_decay" => t.ema_decay = parse(key, v)?,
            "ema_warmup" => t.ema_warmup = parse(key, v)?,
            "eval_ema" => t.eval_ema = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "eval_batch_size" => t.eval_batch_size = parse(key, v)?,
            "max_epochs" | "epochs" => t.max_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "augment" => t.augment.geometric = parse(key, v)?,
            "mix" => t.augment.mix = parse(key, v)?,
            "mixup_alpha" => t.augment.mixup_alpha = parse(key, v)?,
            "cutmix_alpha" => t.augment.cutmix_alpha = parse(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), Error> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("{}:{}: expected `key = value`, got `{raw}`", origin.display(), n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.dataset.num_classes() {
            return Err(Error::config(
                "num_classes",
                format!("{} does not match dataset with {} classes", self.model.num_classes, self.dataset.num_classes()),
            ));
        }
        if (self.model.image_h, self.model.image_w, self.model.channels) != (32, 32, 3) {
            return Err(Error::config("image_h/image_w/channels", "CIFAR images are 3x32x32"));
        }
        if self.subset == Some(0) {
            return Err(Error::config("subset", "must be >= 1"));
        }
        Ok(())
    }

    /// The resolved configuration in the same format the loader reads.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let opt = |o: Option<usize>| o.map_or("all".to_string(), |v| v.to_string());
        let dataset = match self.dataset {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        };
        let rows: Vec<(&str, String)> = vec![
            ("dataset", dataset.into()),
            ("subset", opt(self.subset)),
            ("val_subset", opt(self.val_subset)),
            ("image_h", m.image_h.to_string()),
            ("image_w", m.image_w.to_string()),
            ("channels", m.channels.to_string()),
            ("patch", m.patch.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("latent_tokens", m.latent_tokens.to_string()),
            ("heads", m.heads.to_string()),
            ("ffn_hidden", m.ffn_hidden.to_string()),
            ("block_depth", m.block_depth.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("recursions", m.recursions.to_string()),
            ("latent_steps", m.latent_steps.to_string()),
            ("supervision_steps", m.supervision_steps.to_string()),
            ("halt_threshold", m.halt_threshold.to_string()),
            ("ln_eps", m.ln_eps.to_string()),
            ("lr_max", t.lr_max.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("warmup_fraction", t.warmup_fraction.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("ema_decay", t.ema_decay.to_string()),
            ("ema_warmup", t.ema_warmup.to_string()),
            ("eval_ema", t.eval_ema.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("eval_batch_size", t.eval_batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("seed", t.seed.to_string()),
            ("augment", t.augment.geometric.to_string()),
            ("mix", t.augment.mix.to_string()),
            ("mixup_alpha", t.augment.mixup_alpha.to_string()),
            ("cutmix_alpha", t.augment.cutmix_alpha.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Dataset root: explicit flag, else `VITRM_DATA`, else `./data`.
pub fn data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub const DATA_ENV: &str = "VITRM_DATA";
