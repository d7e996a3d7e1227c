use std::path::{Path, PathBuf};

use moe_upcycle::data::{DataDir, Dataset, Split};
use moe_upcycle::experiment::{
    run_experiment, run_pipeline, ExperimentConfig, Protocol, ProtocolResult, Workdir, ENGAGED_SHARE, NEW, OLD,
};
use moe_upcycle::train::{history_csv, reports_csv, TrainOutcome};
use moe_upcycle::{
    build_freeze_mask, evaluate, CheckpointError, flop_proxy, upcycle as upcycle_model, Checkpoint, EvalReport, FreezeMask,
    KvConfig, Model, MoeConfig, TrainConfig,
};

use crate::error::{CliError, Result};
use crate::{
    Domain, EvalArgs, ExperimentArgs, FlopsArgs, Freeze, GenDataArgs, PretrainArgs, ProtocolArg, SplitName,
    StatsArgs, TrainArgs, UpcycleArgs,
};

const EVAL_BATCH: usize = 16;

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::at(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::at(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io { .. } => CliError::Data(e.to_string()),
        other => CliError::at(path, other),
    })
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::at(parent, e))?;
    }
    ck.save(path).map_err(|e| CliError::at(path, e))
}

fn load_data(dir: &Path) -> Result<(DataDir, Dataset)> {
    let dd = DataDir::load(dir).map_err(|e| CliError::at(dir, e))?;
    let data = dd.generate().map_err(|e| CliError::at(dir, e))?;
    Ok((dd, data))
}

/// Desk defaults for `seed` (7 if absent) with the config file's keys on top.
fn experiment_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::desk(seed.unwrap_or(7));
    match path {
        None => Ok(base),
        Some(p) => {
            let kv = KvConfig::load(p).map_err(|e| CliError::at(p, e))?;
            base.overlay(&kv).map_err(|e| CliError::at(p, e))
        }
    }
}

fn check_compatible(model: &Model, dd: &DataDir, dir: &Path) -> Result<()> {
    let (m, s) = (&model.config, &dd.spec);
    if s.feat_dim != m.feat_dim || s.vocab_size != m.vocab_size {
        return Err(CliError::at(
            dir,
            format!(
                "data has {} features and {} classes, the model expects {} and {}",
                s.feat_dim, s.vocab_size, m.feat_dim, m.vocab_size
            ),
        ));
    }
    if s.max_frames() > m.max_len {
        return Err(CliError::at(
            dir,
            format!("utterances reach {} frames, beyond model max_len {}", s.max_frames(), m.max_len),
        ));
    }
    Ok(())
}

fn pick_split(data: &Dataset, s: SplitName) -> (&Split, &'static str) {
    match s {
        SplitName::Train => (&data.train, "train"),
        SplitName::Valid => (&data.valid, "valid"),
        SplitName::Test => (&data.test, "test"),
    }
}

fn eval_split(model: &Model, split: &Split, name: &str) -> Result<EvalReport> {
    evaluate(model, split, name, EVAL_BATCH).map_err(|e| CliError::Data(format!("evaluation failed: {e}")))
}

fn apply_overrides(tc: &mut TrainConfig, seed: Option<u64>, max_steps: Option<usize>, lr: Option<f32>) {
    if let Some(s) = seed {
        tc.seed = s;
    }
    if let Some(m) = max_steps {
        tc.max_steps = m;
    }
    if let Some(l) = lr {
        tc.peak_lr = l;
    }
}

fn outcome_kv(kv: &mut KvConfig, out: &TrainOutcome) {
    kv.set("steps_run", out.steps_run);
    kv.set("best_step", out.best_step);
    kv.set("best_val_loss", out.best_val_loss);
    kv.set("stopped_early", out.stopped_early);
    kv.set("skipped_sequences", out.skipped);
}

fn report_kv(kv: &mut KvConfig, prefix: &str, r: &EvalReport) {
    kv.set(format!("{prefix}.token_error_rate"), r.token_error_rate);
    kv.set(format!("{prefix}.mean_ctc_loss"), r.mean_ctc_loss);
    kv.set(format!("{prefix}.mean_balance_loss"), r.mean_balance_loss);
    kv.set(format!("{prefix}.sequences"), r.sequences);
}

fn finish_training(
    command: &str,
    out_path: &Path,
    outcome: TrainOutcome,
    trainable: FreezeMask,
    test: &Split,
    mut kv: KvConfig,
) -> Result<()> {
    let history = sibling(out_path, ".history.csv");
    let result = sibling(out_path, ".result");
    let report = eval_split(&outcome.model, test, "test")?;
    kv.set("trainable_params", trainable.trainable_numel(&outcome.model.params));
    kv.set("total_params", outcome.model.params.numel());
    outcome_kv(&mut kv, &outcome);
    report_kv(&mut kv, "test", &report);
    save_checkpoint(&Checkpoint::new(outcome.model, trainable), out_path)?;
    write_file(&history, history_csv(&outcome.history))?;
    write_file(&result, kv.to_text())?;
    println!(
        "{command}: {} steps (best {}, val loss {:.4}{}), test token error rate {:.4}",
        outcome.steps_run,
        outcome.best_step,
        outcome.best_val_loss,
        if outcome.stopped_early { ", stopped early" } else { "" },
        report.token_error_rate
    );
    println!("wrote {}, {}, {}", out_path.display(), history.display(), result.display());
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = experiment_config(a.config.as_deref(), a.seed)?;
    let dd = match a.domain {
        Domain::Old => cfg.old,
        Domain::New => cfg.new,
    };
    dd.save(&a.out).map_err(|e| CliError::at(&a.out, e))?;
    println!(
        "domain `{}`: {} classes, {} features, noise std {}, splits {}/{}/{}",
        dd.spec.id, dd.spec.vocab_size, dd.spec.feat_dim, dd.spec.noise_std, dd.sizes.train, dd.sizes.valid, dd.sizes.test
    );
    println!("wrote {}", a.out.join(moe_upcycle::data::DOMAIN_FILE).display());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = experiment_config(a.config.as_deref(), None)?;
    let (dd, data) = match &a.data {
        Some(dir) => load_data(dir)?,
        None => {
            let data = cfg.old.generate().map_err(|e| CliError::Data(e.to_string()))?;
            (cfg.old.clone(), data)
        }
    };
    let mut tc = cfg.pretrain.clone();
    apply_overrides(&mut tc, a.seed, a.max_steps, a.lr);
    let init_seed = a.seed.unwrap_or(cfg.init_seed);
    let model = Model::dense(cfg.model.clone(), init_seed).map_err(|e| CliError::Usage(e.to_string()))?;
    check_compatible(&model, &dd, a.data.as_deref().unwrap_or(Path::new("config data.old")))?;
    let outcome = moe_upcycle::train(&model, &data.train, &data.valid, &tc, None).map_err(CliError::training)?;
    let mut kv = KvConfig::new();
    kv.set("command", "pretrain");
    kv.set("domain", &dd.spec.id);
    kv.set("init_seed", init_seed);
    kv.extend_prefixed("train", &tc.to_kv());
    let mask = FreezeMask::all(&outcome.model);
    finish_training("pretrain", &a.out, outcome, mask, &data.test, kv)
}

pub fn upcycle(a: UpcycleArgs) -> Result<()> {
    let mut moe = MoeConfig::new(a.experts as usize, a.topk as usize).map_err(|e| CliError::Usage(e.to_string()))?;
    moe.alpha = a.alpha;
    moe.router_noise_std = a.noise_std;
    moe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dense = load_checkpoint(&a.input)?.model;
    let model = upcycle_model(&dense, moe, a.seed).map_err(|e| CliError::at(&a.input, e))?;
    let mask = build_freeze_mask(&model).map_err(|e| CliError::Data(e.to_string()))?;
    let mut kv = KvConfig::new();
    kv.set("command", "upcycle");
    kv.set("input", a.input.display());
    kv.set("n_experts", a.experts);
    kv.set("top_k", a.topk);
    kv.set("router_noise_std", a.noise_std);
    kv.set("seed", a.seed);
    kv.set("dense_params", dense.params.numel());
    kv.set("total_params", model.params.numel());
    kv.set("trainable_params", mask.trainable_numel(&model.params));
    let ctx = model.config.max_len;
    kv.set("dense_flops_per_frame", flop_proxy(&dense.config, None, ctx).total);
    kv.set("flops_per_frame", flop_proxy(&model.config, model.moe.as_ref(), ctx).total);
    let result = sibling(&a.out, ".result");
    println!(
        "upcycled {} -> {} parameters ({} experts, top-{}), {} trainable under the freeze mask",
        dense.params.numel(),
        model.params.numel(),
        a.experts,
        a.topk,
        mask.trainable_numel(&model.params)
    );
    save_checkpoint(&Checkpoint::new(model, mask), &a.out)?;
    write_file(&result, kv.to_text())?;
    println!("wrote {}, {}", a.out.display(), result.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let ck = load_checkpoint(&a.input)?;
    let model = ck.model;
    let (dd, data) = load_data(&a.data)?;
    check_compatible(&model, &dd, &a.data)?;
    let freeze = a.freeze.unwrap_or(if model.is_moe() { Freeze::MoeOnly } else { Freeze::None });
    let mask = match freeze {
        Freeze::MoeOnly => build_freeze_mask(&model)
            .map_err(|_| CliError::Usage(format!("--freeze moe-only needs an MoE checkpoint; {} is dense", a.input.display())))?,
        Freeze::None => FreezeMask::all(&model),
    };
    let base = ExperimentConfig::default().continued;
    let mut tc = match &a.config {
        Some(p) => {
            let kv = KvConfig::load(p).map_err(|e| CliError::at(p, e))?;
            TrainConfig::from_kv(&kv, &base).map_err(|e| CliError::at(p, e))?
        }
        None => base,
    };
    apply_overrides(&mut tc, a.seed, a.max_steps, a.lr);
    tc.alpha = a.alpha.unwrap_or(model.moe.as_ref().map_or(0.0, |m| m.alpha));
    let restrict = (freeze == Freeze::MoeOnly).then_some(&mask);
    let outcome = moe_upcycle::train(&model, &data.train, &data.valid, &tc, restrict).map_err(CliError::training)?;
    let mut kv = KvConfig::new();
    kv.set("command", "train");
    kv.set("input", a.input.display());
    kv.set("domain", &dd.spec.id);
    kv.set("freeze", if freeze == Freeze::MoeOnly { "moe-only" } else { "none" });
    kv.extend_prefixed("train", &tc.to_kv());
    finish_training("train", &a.out, outcome, mask, &data.test, kv)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.input)?.model;
    let (dd, data) = load_data(&a.data)?;
    check_compatible(&model, &dd, &a.data)?;
    let (split, name) = pick_split(&data, a.split);
    let dataset = format!("{}/{name}", dd.spec.id);
    let report = evaluate(&model, split, &dataset, a.batch_size.max(1))
        .map_err(|e| CliError::Data(format!("evaluation failed: {e}")))?;
    write_file(&a.report, reports_csv(std::slice::from_ref(&report)))?;
    println!(
        "{dataset}: token error rate {:.4}, mean CTC loss {:.4}, mean balance loss {:.4}, {} sequences ({} infeasible), {} MACs per frame",
        report.token_error_rate,
        report.mean_ctc_loss,
        report.mean_balance_loss,
        report.sequences,
        report.infeasible,
        report.flops_per_token
    );
    println!("wrote {}", a.report.display());
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let model = load_checkpoint(&a.input)?.model;
    if !model.is_moe() {
        return Err(CliError::at(&a.input, "dense checkpoint has no routers to report"));
    }
    let (dd, data) = load_data(&a.data)?;
    check_compatible(&model, &dd, &a.data)?;
    let (split, name) = pick_split(&data, a.split);
    let report = eval_split(&model, split, name)?;
    let usage = report.usage.expect("MoE evaluation collects usage");
    write_file(&a.out, usage.to_csv())?;
    for (l, layer) in usage.layers.iter().enumerate() {
        let shares: Vec<String> = layer.activation_share().iter().map(|s| format!("{s:.3}")).collect();
        println!(
            "layer {l}: {} of {} experts engaged, activation shares [{}]",
            layer.engaged_experts(ENGAGED_SHARE),
            layer.dispatch.len(),
            shares.join(" ")
        );
    }
    println!(
        "{} engaged in total (share >= {ENGAGED_SHARE}) over {} tokens per layer",
        usage.engaged_experts(ENGAGED_SHARE),
        usage.layers.first().map_or(0, |l| l.tokens)
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn flops(a: FlopsArgs) -> Result<()> {
    let model = load_checkpoint(&a.input)?.model;
    let ctx = a.context.unwrap_or(model.config.max_len);
    let f = flop_proxy(&model.config, model.moe.as_ref(), ctx);
    let dense = flop_proxy(&model.config, None, ctx);
    let mut kv = KvConfig::new();
    kv.set("command", "flops");
    kv.set("context", ctx);
    kv.set("attention", f.attention);
    kv.set("ffn", f.ffn);
    kv.set("router", f.router);
    kv.set("frontend_head", f.frontend_head);
    kv.set("per_block", f.per_block);
    kv.set("blocks", model.config.n_blocks);
    kv.set("total", f.total);
    kv.set("dense_total", dense.total);
    let out = a.out.unwrap_or_else(|| sibling(&a.input, ".flops"));
    write_file(&out, kv.to_text())?;
    println!(
        "per block: attention {} + ffn {} + router {} = {}",
        f.attention, f.ffn, f.router, f.per_block
    );
    println!(
        "total {} MACs per frame over {} blocks (dense equivalent {}, ratio {:.3})",
        f.total,
        model.config.n_blocks,
        dense.total,
        f.total as f64 / dense.total as f64
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn protocol_kv(r: &ProtocolResult) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("protocol", r.protocol);
    kv.set("steps_run", r.steps_run);
    kv.set("best_step", r.best_step);
    kv.set("stopped_early", r.stopped_early);
    kv.set("trainable_params", r.trainable_params);
    kv.set("total_params", r.total_params);
    for d in [OLD, NEW] {
        report_kv(&mut kv, d, r.report(d));
        if let Some(e) = r.engaged_experts(d) {
            kv.set(format!("{d}.engaged_experts"), e);
        }
    }
    kv
}

fn print_protocol(r: &ProtocolResult) {
    let engaged = r
        .engaged_experts(NEW)
        .map(|e| format!(", {e} experts engaged on new"))
        .unwrap_or_default();
    println!(
        "{:<14} old error {:.4}  new error {:.4}  ({} steps, {} of {} parameters trainable{engaged})",
        r.protocol.name(),
        r.report(OLD).token_error_rate,
        r.report(NEW).token_error_rate,
        r.steps_run,
        r.trainable_params,
        r.total_params
    );
}

fn run_one(p: Protocol, wd: &Workdir) -> Result<ProtocolResult> {
    let r = run_experiment(p, wd)?;
    write_file(&wd.protocol(p).join("result.conf"), protocol_kv(&r).to_text())?;
    print_protocol(&r);
    Ok(r)
}

pub fn experiment(a: ExperimentArgs) -> Result<()> {
    let wd = Workdir::new(&a.workdir);
    if wd.config().exists() {
        let stored = wd.load_config()?;
        if a.config.is_some() || a.seed.is_some() {
            let requested = experiment_config(a.config.as_deref(), a.seed)?;
            if requested != stored {
                return Err(CliError::at(
                    &wd.config(),
                    "work directory was initialized with a different config",
                ));
            }
        }
    } else {
        wd.init(&experiment_config(a.config.as_deref(), a.seed)?)?;
    }
    match a.protocol {
        ProtocolArg::All => {
            let results = run_pipeline(&wd)?;
            for r in &results {
                write_file(&wd.protocol(r.protocol).join("result.conf"), protocol_kv(r).to_text())?;
                print_protocol(r);
            }
            println!("wrote {}", wd.summary().display());
        }
        ProtocolArg::One(p) => {
            if p != Protocol::Pretrain && !wd.checkpoint(Protocol::Pretrain).exists() {
                println!("{p} needs the pretrained checkpoint; running PRETRAIN first");
                run_one(Protocol::Pretrain, &wd)?;
            }
            run_one(p, &wd)?;
            println!("artifacts in {}", wd.protocol(p).display());
        }
    }
    Ok(())
}
