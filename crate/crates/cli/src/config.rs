//! The merged run configuration: built-in defaults, overridden by a flat
//! `key=value` config file, overridden by command-line flags. The effective
//! result is echoed into every report for provenance.

use anyhow::{bail, Context, Result};
use sriem_core::dataset::DataFormat;
use sriem_core::iem::ScaleBy;
use sriem_core::model::{LossMode, ModelConfig, Variant};
use sriem_core::trainer::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub d: usize,
    pub l: usize,
    pub variant: Variant,
    pub loss: LossMode,
    pub scale_by: ScaleBy,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub l2: f64,
    pub epochs: usize,
    pub patience: usize,
    pub max_len: usize,
    pub n: usize,
    pub seed: u64,
    pub min_item_support: usize,
    pub test_days: f64,
    pub format: DataFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 200,
            l: 100,
            variant: Variant::Iem,
            loss: LossMode::BceSum,
            scale_by: ScaleBy::SqrtD,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 3,
            batch: 128,
            l2: 1e-5,
            epochs: 30,
            patience: 3,
            max_len: 10,
            n: 20,
            seed: 42,
            min_item_support: 5,
            test_days: 1.0,
            format: DataFormat::SimpleSessions,
        }
    }
}

/// Flag-level overrides; `None` means "not given".
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Flat key=value config file applied before the flags
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Embedding width
    #[arg(long)]
    pub d: Option<usize>,
    /// Attention width
    #[arg(long)]
    pub l: Option<usize>,
    /// Attention variant: iem, sat or stamp
    #[arg(long)]
    pub variant: Option<String>,
    /// Loss mode: bce-sum or categorical-ce
    #[arg(long)]
    pub loss: Option<String>,
    /// Affinity scaling: sqrt-d or sqrt-l
    #[arg(long)]
    pub scale_by: Option<String>,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay factor
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Epochs between decays
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// Batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// L2 regularization weight
    #[arg(long)]
    pub l2: Option<f64>,
    /// Maximum training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Early-stopping patience in epochs
    #[arg(long)]
    pub patience: Option<usize>,
    /// Maximum modeled session length
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Ranking cutoff N for Recall@N / MRR@N
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed for every random choice in the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Items clicked fewer times are dropped in preprocessing
    #[arg(long)]
    pub min_item_support: Option<usize>,
    /// Final days of the log held out as the test split
    #[arg(long)]
    pub test_days: Option<f64>,
    /// Input format: yoochoose-csv, diginetica-csv or simple-sessions
    #[arg(long)]
    pub format: Option<String>,
}

impl RunConfig {
    /// defaults <- config file <- flags.
    pub fn resolve(overrides: &Overrides) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &overrides.config {
            config.apply_file(path)?;
        }
        config.apply_overrides(overrides)?;
        Ok(config)
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                );
            };
            self.apply_kv(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow::anyhow!("invalid value `{value}` for {key}: {e}"))
        }
        match key {
            "d" => self.d = parse(key, value)?,
            "l" => self.l = parse(key, value)?,
            "variant" => self.variant = Variant::from_str(value)?,
            "loss" => self.loss = LossMode::from_str(value)?,
            "scale-by" => self.scale_by = parse_scale_by(value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay-factor" => self.decay_factor = parse(key, value)?,
            "decay-every" => self.decay_every = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max-len" => self.max_len = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "min-item-support" => self.min_item_support = parse(key, value)?,
            "test-days" => self.test_days = parse(key, value)?,
            "format" => self.format = DataFormat::from_str(value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.d {
            self.d = v;
        }
        if let Some(v) = o.l {
            self.l = v;
        }
        if let Some(v) = &o.variant {
            self.variant = Variant::from_str(v)?;
        }
        if let Some(v) = &o.loss {
            self.loss = LossMode::from_str(v)?;
        }
        if let Some(v) = &o.scale_by {
            self.scale_by = parse_scale_by(v)?;
        }
        if let Some(v) = o.lr {
            self.lr = v;
        }
        if let Some(v) = o.decay_factor {
            self.decay_factor = v;
        }
        if let Some(v) = o.decay_every {
            self.decay_every = v;
        }
        if let Some(v) = o.batch {
            self.batch = v;
        }
        if let Some(v) = o.l2 {
            self.l2 = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = o.patience {
            self.patience = v;
        }
        if let Some(v) = o.max_len {
            self.max_len = v;
        }
        if let Some(v) = o.n {
            self.n = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.min_item_support {
            self.min_item_support = v;
        }
        if let Some(v) = o.test_days {
            self.test_days = v;
        }
        if let Some(v) = &o.format {
            self.format = DataFormat::from_str(v)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            l: self.l,
            variant: self.variant,
            loss_mode: self.loss,
            scale_by: self.scale_by,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            batch_size: self.batch,
            l2: self.l2,
            epochs: self.epochs,
            patience: self.patience,
            max_len: self.max_len,
            eval_cutoff: self.n,
            seed: self.seed,
        }
    }

    /// Ordered key=value view, echoed into reports.
    pub fn as_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("d".into(), self.d.to_string());
        map.insert("l".into(), self.l.to_string());
        map.insert("variant".into(), self.variant.to_string());
        map.insert("loss".into(), self.loss.to_string());
        map.insert(
            "scale-by".into(),
            match self.scale_by {
                ScaleBy::SqrtD => "sqrt-d".into(),
                ScaleBy::SqrtL => "sqrt-l".to_string(),
            },
        );
        map.insert("lr".into(), format!("{:e}", self.lr));
        map.insert("decay-factor".into(), self.decay_factor.to_string());
        map.insert("decay-every".into(), self.decay_every.to_string());
        map.insert("batch".into(), self.batch.to_string());
        map.insert("l2".into(), format!("{:e}", self.l2));
        map.insert("epochs".into(), self.epochs.to_string());
        map.insert("patience".into(), self.patience.to_string());
        map.insert("max-len".into(), self.max_len.to_string());
        map.insert("n".into(), self.n.to_string());
        map.insert("seed".into(), self.seed.to_string());
        map.insert("min-item-support".into(), self.min_item_support.to_string());
        map.insert("test-days".into(), self.test_days.to_string());
        map.insert("format".into(), self.format.to_string());
        map
    }
}

fn parse_scale_by(value: &str) -> Result<ScaleBy> {
    match value {
        "sqrt-d" => Ok(ScaleBy::SqrtD),
        "sqrt-l" => Ok(ScaleBy::SqrtL),
        other => bail!("unknown scale-by `{other}` (expected sqrt-d or sqrt-l)"),
    }
}
