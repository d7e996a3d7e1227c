//! Protocols of the two-domain continued-training study.
//!
//! A dense model is pretrained on the old domain. Each continuation
//! protocol then trains on the new domain and is evaluated on both test
//! sets. Everything lives under one work directory:
//!
//! ```text
//! experiment.conf
//! data/old/domain.conf    data/new/domain.conf
//! pretrain/  model.ckpt history.csv eval.csv
//! fmft/      model.ckpt history.csv eval.csv
//! ume/       upcycled.ckpt eval_step0.csv model.ckpt history.csv eval.csv
//!            usage_old.csv usage_new.csv
//! ume_nofreeze/ ...   ume_nobalance/ ...
//! summary.csv             (written by the full pipeline)
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, KvConfig};
use crate::data::{DataDir, DataError, Dataset, DomainSpec, SplitSizes};
use crate::model::{Model, ModelConfig, ModelError};
use crate::moe::MoeConfig;
use crate::train::{self, EvalReport, TrainConfig, TrainError, TrainOutcome};
use crate::upcycle::{build_freeze_mask, upcycle, FreezeMask, UpcycleError};

/// Minimum share of a layer's top-k activations for an expert to count as engaged.
pub const ENGAGED_SHARE: f64 = 0.05;
pub const CONFIG_FILE: &str = "experiment.conf";
pub const OLD: &str = "old";
pub const NEW: &str = "new";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown protocol `{0}`")]
    UnknownProtocol(String),
    #[error("{protocol} needs checkpoint {path}; run {needs} first")]
    MissingCheckpoint {
        protocol: Protocol,
        needs: Protocol,
        path: PathBuf,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{step}: {source}")]
    Train {
        step: String,
        source: TrainError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Upcycle(#[from] UpcycleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Dense model trained on the old domain.
    Pretrain,
    /// Dense continuation on the new domain, all parameters.
    Fmft,
    /// Upcycle, freeze everything but experts and routers, balance.
    Ume,
    /// Upcycle and train every parameter.
    UmeNoFreeze,
    /// Upcycle and freeze, without the balance loss.
    UmeNoBalance,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::Pretrain,
        Protocol::Fmft,
        Protocol::Ume,
        Protocol::UmeNoFreeze,
        Protocol::UmeNoBalance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Pretrain => "PRETRAIN",
            Protocol::Fmft => "FMFT",
            Protocol::Ume => "UME",
            Protocol::UmeNoFreeze => "UME_NOFREEZE",
            Protocol::UmeNoBalance => "UME_NOBALANCE",
        }
    }

    pub fn dir_name(self) -> String {
        self.name().to_ascii_lowercase()
    }

    pub fn is_upcycled(self) -> bool {
        matches!(self, Protocol::Ume | Protocol::UmeNoFreeze | Protocol::UmeNoBalance)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ExperimentError::UnknownProtocol(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub moe: MoeConfig,
    pub pretrain: TrainConfig,
    /// Continued training; `alpha` is taken from `moe.alpha` (zero without balancing).
    pub continued: TrainConfig,
    pub old: DataDir,
    pub new: DataDir,
    /// Dense initialization seed.
    pub init_seed: u64,
    /// Router noise seed.
    pub upcycle_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk(7)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: the new domain re-voices every symbol and skews
    /// the label distribution.
    pub fn desk(seed: u64) -> Self {
        let vocab = 9;
        let feat = 8;
        let old = DomainSpec::random(OLD, vocab, feat, 0.3, seed);
        // Frequent first three symbols, and every template moved by its own offset.
        let weights = (1..vocab).map(|s| if s <= 3 { 4.0 } else { 1.0 }).collect();
        let new = old.perturbed(NEW, 1.2, seed ^ 0xbeef, weights);
        let sizes = SplitSizes {
            train: 384,
            valid: 64,
            test: 128,
        };
        Self {
            model: ModelConfig {
                feat_dim: feat,
                d_model: 32,
                n_blocks: 2,
                ffn_hidden: 64,
                n_heads: 2,
                vocab_size: vocab,
                downsample_rate: 2,
                max_len: old.max_frames(),
            },
            moe: MoeConfig {
                n_experts: 8,
                top_k: 2,
                alpha: crate::moe::DEFAULT_ALPHA,
                router_noise_std: 1.0,
            },
            pretrain: TrainConfig {
                peak_lr: 3e-3,
                max_steps: 1500,
                seed,
                ..TrainConfig::default()
            },
            continued: TrainConfig {
                peak_lr: 2e-3,
                max_steps: 600,
                seed: seed + 1,
                ..TrainConfig::default()
            },
            old: DataDir {
                spec: old,
                sizes,
                seed: seed + 10,
            },
            new: DataDir {
                spec: new,
                sizes,
                seed: seed + 20,
            },
            init_seed: seed + 30,
            upcycle_seed: seed + 40,
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("init_seed", self.init_seed);
        kv.set("upcycle_seed", self.upcycle_seed);
        kv.extend_prefixed("model", &self.model.to_kv());
        kv.extend_prefixed("moe", &self.moe.to_kv());
        kv.extend_prefixed("pretrain", &self.pretrain.to_kv());
        kv.extend_prefixed("continued", &self.continued.to_kv());
        kv.extend_prefixed("data.old", &self.old.to_kv());
        kv.extend_prefixed("data.new", &self.new.to_kv());
        kv
    }

    /// Keys present in `kv` override this configuration.
    pub fn overlay(&self, kv: &KvConfig) -> Result<Self> {
        const PREFIXES: [&str; 6] = ["model.", "moe.", "pretrain.", "continued.", "data.old.", "data.new."];
        for k in kv.keys() {
            if !(k == "init_seed" || k == "upcycle_seed" || PREFIXES.iter().any(|p| k.starts_with(p))) {
                return Err(ConfigError::Unknown(k.to_string()).into());
            }
        }
        let data = |name: &str, base: &DataDir| -> Result<DataDir> {
            let mut merged = base.to_kv();
            merged.merge(&kv.section(&format!("data.{name}")));
            Ok(DataDir::from_kv(&merged)?)
        };
        let out = Self {
            model: ModelConfig::from_kv(&kv.section("model"), &self.model)?,
            moe: MoeConfig::from_kv(&kv.section("moe"), &self.moe)?,
            pretrain: TrainConfig::from_kv(&kv.section("pretrain"), &self.pretrain)
                .map_err(|e| train_err("pretrain config", e))?,
            continued: TrainConfig::from_kv(&kv.section("continued"), &self.continued)
                .map_err(|e| train_err("continued config", e))?,
            old: data(OLD, &self.old)?,
            new: data(NEW, &self.new)?,
            init_seed: kv.get_or("init_seed", self.init_seed)?,
            upcycle_seed: kv.get_or("upcycle_seed", self.upcycle_seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.moe
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        self.pretrain.validate().map_err(|e| train_err("pretrain config", e))?;
        self.continued.validate().map_err(|e| train_err("continued config", e))?;
        for d in [&self.old, &self.new] {
            d.spec.validate()?;
            let fail = |reason: String| DataError::Spec {
                id: d.spec.id.clone(),
                reason,
            };
            if d.spec.feat_dim != self.model.feat_dim || d.spec.vocab_size != self.model.vocab_size {
                return Err(fail("feature width or vocabulary differs from the model".into()).into());
            }
            if d.spec.max_frames() > self.model.max_len {
                return Err(fail(format!(
                    "utterances reach {} frames, beyond model max_len {}",
                    d.spec.max_frames(),
                    self.model.max_len
                ))
                .into());
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::default().overlay(&KvConfig::load(path)?)
    }
}

fn train_err(step: &str, source: TrainError) -> ExperimentError {
    ExperimentError::Train {
        step: step.to_string(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Paths of one work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn data(&self, domain: &str) -> PathBuf {
        self.root.join("data").join(domain)
    }

    pub fn protocol(&self, p: Protocol) -> PathBuf {
        self.root.join(p.dir_name())
    }

    pub fn checkpoint(&self, p: Protocol) -> PathBuf {
        self.protocol(p).join("model.ckpt")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    /// Writes the manifest and both data directories.
    pub fn init(&self, cfg: &ExperimentConfig) -> Result<()> {
        cfg.validate()?;
        write(&self.config(), cfg.to_kv().to_text())?;
        cfg.old.save(&self.data(OLD))?;
        cfg.new.save(&self.data(NEW))?;
        Ok(())
    }

    pub fn load_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config())
    }
}

/// Artifacts of one protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    /// Old-domain then new-domain test reports of the trained model.
    pub reports: Vec<EvalReport>,
    /// Same reports for the freshly upcycled model before any update.
    pub initial_reports: Option<Vec<EvalReport>>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub steps_run: usize,
    pub best_step: usize,
    pub stopped_early: bool,
}

impl ProtocolResult {
    pub fn report(&self, domain: &str) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.dataset == domain)
            .expect("both domains are always evaluated")
    }

    pub fn engaged_experts(&self, domain: &str) -> Option<usize> {
        self.report(domain)
            .usage
            .as_ref()
            .map(|u| u.engaged_experts(ENGAGED_SHARE))
    }
}

struct Data {
    old: Dataset,
    new: Dataset,
}

fn load_data(wd: &Workdir) -> Result<Data> {
    Ok(Data {
        old: DataDir::load(&wd.data(OLD))?.generate()?,
        new: DataDir::load(&wd.data(NEW))?.generate()?,
    })
}

fn evaluate_both(model: &Model, data: &Data, batch: usize) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for (name, d) in [(OLD, &data.old), (NEW, &data.new)] {
        out.push(train::evaluate(model, &d.test, name, batch).map_err(|e| train_err("evaluate", e))?);
    }
    Ok(out)
}

fn write_reports(dir: &Path, file: &str, reports: &[EvalReport]) -> Result<()> {
    write(&dir.join(file), train::reports_csv(reports))?;
    for r in reports {
        if let Some(u) = &r.usage {
            let name = if file.starts_with("eval_step0") {
                format!("usage_step0_{}.csv", r.dataset)
            } else {
                format!("usage_{}.csv", r.dataset)
            };
            write(&dir.join(name), u.to_csv())?;
        }
    }
    Ok(())
}

fn load_pretrained(wd: &Workdir, protocol: Protocol) -> Result<Checkpoint> {
    let path = wd.checkpoint(Protocol::Pretrain);
    if !path.exists() {
        return Err(ExperimentError::MissingCheckpoint {
            protocol,
            needs: Protocol::Pretrain,
            path,
        });
    }
    Ok(Checkpoint::load(&path)?)
}

/// Runs one protocol in an initialized work directory. Continuation
/// protocols require the pretrained checkpoint.
pub fn run_experiment(protocol: Protocol, wd: &Workdir) -> Result<ProtocolResult> {
    let cfg = wd.load_config()?;
    let data = load_data(wd)?;
    let dir = wd.protocol(protocol);
    std::fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut initial_reports = None;

    let (start, mask, tcfg, train_data) = match protocol {
        Protocol::Pretrain => {
            let model = Model::dense(cfg.model.clone(), cfg.init_seed)?;
            (model, None, cfg.pretrain.clone(), &data.old)
        }
        Protocol::Fmft => {
            let dense = load_pretrained(wd, protocol)?.model;
            (dense, None, cfg.continued.clone(), &data.new)
        }
        Protocol::Ume | Protocol::UmeNoFreeze | Protocol::UmeNoBalance => {
            let dense = load_pretrained(wd, protocol)?.model;
            let moe = upcycle(&dense, cfg.moe.clone(), cfg.upcycle_seed)?;
            let mask = match protocol {
                Protocol::UmeNoFreeze => FreezeMask::all(&moe),
                _ => build_freeze_mask(&moe)?,
            };
            Checkpoint::new(moe.clone(), mask.clone()).save(&dir.join("upcycled.ckpt"))?;
            let step0 = evaluate_both(&moe, &data, cfg.continued.batch_size)?;
            write_reports(&dir, "eval_step0.csv", &step0)?;
            initial_reports = Some(step0);
            let mut tcfg = cfg.continued.clone();
            tcfg.alpha = if protocol == Protocol::UmeNoBalance { 0.0 } else { cfg.moe.alpha };
            (moe, Some(mask), tcfg, &data.new)
        }
    };

    let mask = mask.unwrap_or_else(|| FreezeMask::all(&start));
    let frozen_run = mask.len() < start.params.len();
    let outcome: TrainOutcome = train::train(
        &start,
        &train_data.train,
        &train_data.valid,
        &tcfg,
        frozen_run.then_some(&mask),
    )
    .map_err(|e| train_err(&format!("{protocol} training"), e))?;

    Checkpoint::new(outcome.model.clone(), mask.clone()).save(&dir.join("model.ckpt"))?;
    write(&dir.join("history.csv"), train::history_csv(&outcome.history))?;
    let reports = evaluate_both(&outcome.model, &data, tcfg.batch_size)?;
    write_reports(&dir, "eval.csv", &reports)?;

    Ok(ProtocolResult {
        protocol,
        reports,
        initial_reports,
        trainable_params: mask.trainable_numel(&outcome.model.params),
        total_params: outcome.model.params.numel(),
        steps_run: outcome.steps_run,
        best_step: outcome.best_step,
        stopped_early: outcome.stopped_early,
    })
}

pub const SUMMARY_HEADER: &str =
    "protocol,old_error,new_error,old_degradation,engaged_experts,trainable_params,total_params,steps_run,best_step";

/// Runs every protocol in order and writes `summary.csv`.
pub fn run_pipeline(wd: &Workdir) -> Result<Vec<ProtocolResult>> {
    let mut results = Vec::new();
    for p in Protocol::ALL {
        results.push(run_experiment(p, wd)?);
    }
    write(&wd.summary(), summary_csv(&results))?;
    Ok(results)
}

/// One row per protocol; degradation is relative to the pretrained model's old-domain error.
pub fn summary_csv(results: &[ProtocolResult]) -> String {
    let base = results
        .iter()
        .find(|r| r.protocol == Protocol::Pretrain)
        .map(|r| r.report(OLD).token_error_rate);
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in results {
        let old = r.report(OLD).token_error_rate;
        let deg = base.map(|b| (old - b).to_string()).unwrap_or_default();
        let engaged = r.engaged_experts(NEW).map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.protocol,
            old,
            r.report(NEW).token_error_rate,
            deg,
            engaged,
            r.trainable_params,
            r.total_params,
            r.steps_run,
            r.best_step
        );
    }
    out
}
