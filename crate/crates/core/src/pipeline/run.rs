use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::data::{
    gen_fictional, gen_pretrain_corpus, gen_retention_suite, load_corpus, measurement_set,
    save_corpus, tokenize_and_pack, Domain, FictionalSpec, ProbeCorpus, RetentionSuite,
    SyntheticCorpusSpec, Vocab, World,
};
use crate::entropy::{measure, write_reports, CoefficientMode, CoefficientStats, EntropyReport};
use crate::error::{Error, Result};
use crate::metrics::{probe_performance, retention_performance, write_probe_csv, MetricsReport};
use crate::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint};
use crate::resuscitation::{apply_surgery, plan_surgery, ResuscitationSpec, SurgeryPlan};
use crate::training::{continual_train, pretrain, write_audit, write_train_log, InjectionPlan};

pub const RUN_RECORD: &str = "run.toml";
const RETENTION_RELATIONS: [usize; 4] = [0, 1, 2, 3];

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Creates `dir`. An existing nonempty directory is an error unless `force`,
/// in which case it is emptied first.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)?.next().is_some();
        if nonempty && !force {
            return Err(Error::Validation(format!(
                "run directory {} already exists (use --force to overwrite)",
                dir.display()
            )));
        }
        if nonempty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Provenance written to every run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub kelab_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Input artifact paths as given on the command line.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every input artifact.
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
    /// Checkpoint provenance carried forward (fraction, surgery settings).
    #[serde(default)]
    pub source_meta: BTreeMap<String, String>,
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

impl RunRecord {
    fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            kelab_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            ..Default::default()
        }
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs
            .insert(name.to_string(), path.display().to_string());
        self.digests.insert(name.to_string(), file_digest(path)?);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("record serializes");
        fs::write(dir.join(RUN_RECORD), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_RECORD);
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// All text artifacts of an experiment, a pure function of the config.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub pretrain: Vec<String>,
    pub continual: Vec<String>,
    pub probes: ProbeCorpus,
    pub retention: RetentionSuite,
    pub vocab: Vocab,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let pretrain = match &d.pretrain_corpus {
            Some(path) => load_corpus(path)?,
            None => gen_pretrain_corpus(&SyntheticCorpusSpec {
                seed: cfg.seed,
                n_documents: d.pretrain_documents,
                domain: Domain::Base,
                grammar: d.grammar,
                entity_pool_size: d.pretrain_entities,
            })?,
        };
        let continual = gen_pretrain_corpus(&SyntheticCorpusSpec {
            seed: cfg.seed,
            n_documents: d.continual_documents,
            domain: Domain::Shifted,
            grammar: d.grammar,
            entity_pool_size: d.continual_entities,
        })?;
        let probes = gen_fictional(&FictionalSpec {
            n_paraphrases: d.n_paraphrases,
            ..FictionalSpec::new(cfg.seed, d.n_para_items, d.n_once_items)
        })?;
        probes.check_absent_from(pretrain.iter().map(String::as_str))?;
        let world = World::generate(cfg.seed, Domain::Base, d.pretrain_entities)?;
        let retention = gen_retention_suite(
            &world,
            cfg.seed,
            &RETENTION_RELATIONS,
            d.retention_items,
            d.retention_candidates,
        )?;

        let mut texts: Vec<&str> = pretrain
            .iter()
            .chain(&continual)
            .map(String::as_str)
            .collect();
        for item in &probes.items {
            texts.push(&item.paragraph);
            texts.extend(item.paraphrases.iter().map(String::as_str));
            for p in &item.probes {
                texts.push(&p.context);
                texts.push(&p.target);
            }
        }
        for task in &retention.tasks {
            for item in &task.items {
                texts.push(&item.context);
                texts.extend(item.candidates.iter().map(String::as_str));
            }
        }
        let distinct: std::collections::BTreeSet<&str> =
            texts.iter().flat_map(|t| t.split_whitespace()).collect();
        if distinct.len() + 3 > cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "the generated text has {} word types but vocab_size is {}",
                distinct.len(),
                cfg.model.vocab_size
            )));
        }
        let vocab = Vocab::build(texts, cfg.model.vocab_size)?;
        Ok(Self {
            pretrain,
            continual,
            probes,
            retention,
            vocab,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_corpus(&self.pretrain, &dir.join("pretrain.txt"))?;
        save_corpus(&self.continual, &dir.join("continual.txt"))?;
        self.probes.save(&dir.join("probes.json"))?;
        let retention = serde_json::to_string_pretty(&self.retention)
            .map_err(|e| Error::Validation(e.to_string()))?;
        fs::write(dir.join("retention.json"), retention)?;
        self.vocab.save(&dir.join("vocab.txt"))
    }
}

fn check_vocab(ckpt: &Checkpoint, vocab: &Vocab, digest: &str) -> Result<()> {
    if vocab.len() > ckpt.config.vocab_size {
        return Err(Error::Validation(format!(
            "vocabulary has {} entries but the checkpoint embeds {}",
            vocab.len(),
            ckpt.config.vocab_size
        )));
    }
    if let Some(expected) = ckpt.meta.get("vocab_sha256") {
        if expected != digest {
            return Err(Error::Validation(
                "vocabulary differs from the one the checkpoint was trained with".into(),
            ));
        }
    }
    Ok(())
}

fn fraction_tag(f: f64) -> String {
    format!("frac-{f:.3}")
}

pub struct PretrainRun {
    pub checkpoints: Vec<(f64, PathBuf)>,
    pub reports: Vec<(f64, EntropyReport)>,
    pub final_loss: f64,
}

/// Generates data, trains from scratch and measures entropy at each checkpoint fraction.
///
/// Layout: `config.toml`, `run.toml`, `data/`, `checkpoints/frac-*.kelab`,
/// `stats/frac-*.kelab`, `train_log.csv`, `entropy.csv`, `entropy_layers.csv`.
pub fn run_pretrain(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<PretrainRun> {
    cfg.validate()?;
    prepare_run_dir(dir, force)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let data = Datasets::generate(cfg)?;
    data.save(&dir.join("data"))?;
    let vocab_sha = file_digest(&dir.join("data/vocab.txt"))?;
    let mut record = RunRecord::new("pretrain", Some(cfg.seed));
    if let Some(p) = &cfg.data.pretrain_corpus {
        record.input("pretrain_corpus", p)?;
    }
    record.digests.insert("vocab".into(), vocab_sha.clone());
    record.write(dir)?;

    let packed = tokenize_and_pack(&data.pretrain, &data.vocab, cfg.data.seq_len)?;
    info!(
        "pretraining on {} rows of {} tokens",
        packed.rows.len(),
        cfg.data.seq_len
    );
    let set = measurement_set(&packed, cfg.measure.n_instances, cfg.seed);
    let set_id = format!("pretrain:n={}:seed={}", set.len(), cfg.seed);
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("stats"))?;

    let mut start = init_model(&cfg.model_config())?;
    start.meta.insert("seed".into(), cfg.seed.to_string());
    start.meta.insert("vocab_sha256".into(), vocab_sha);
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let train_cfg = cfg.pretrain.train.train_config(cfg.seed);
    let outcome = pretrain(
        start,
        &packed,
        &train_cfg,
        &cfg.pretrain.fractions,
        |ckpt, f| {
            let mut ckpt = ckpt.clone();
            ckpt.meta.insert("fraction".into(), format!("{f}"));
            let tag = fraction_tag(f);
            let path = dir.join("checkpoints").join(format!("{tag}.kelab"));
            save_checkpoint(&ckpt, &path)?;
            let (stats, report) = measure(&ckpt, &set, cfg.measure.mode, &set_id)?;
            stats.save(
                &dir.join("stats").join(format!("{tag}.kelab")),
                &ckpt.config,
                ckpt.step,
                &[("measurement_set", &set_id), ("fraction", &format!("{f}"))],
            )?;
            info!(
                "step {} ({tag}): H_knowledge {:.4}, H_attention {:.4}, H_next {:.4}",
                ckpt.step,
                report.knowledge_total,
                report.attention_total,
                report.next_token.unwrap_or(f64::NAN)
            );
            checkpoints.push((f, path));
            reports.push((f, report));
            Ok(())
        },
    )?;
    write_train_log(&dir.join("train_log.csv"), &outcome.log)?;
    let mut summary = String::from("fraction,step,h_knowledge,h_attention,h_next_token\n");
    for (f, r) in &reports {
        writeln!(
            summary,
            "{f},{},{:e},{:e},{:e}",
            r.step,
            r.knowledge_total,
            r.attention_total,
            r.next_token.unwrap_or(f64::NAN)
        )
        .expect("string write");
    }
    fs::write(dir.join("entropy.csv"), summary)?;
    let only: Vec<EntropyReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    write_reports(&dir.join("entropy_layers.csv"), &only)?;
    let final_loss = outcome.log.last().map_or(f64::NAN, |l| l.loss);
    Ok(PretrainRun {
        checkpoints,
        reports,
        final_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub modes: Vec<CoefficientMode>,
    pub n_instances: usize,
    pub seed: u64,
    /// Row length for packing; the checkpoint's `max_seq_len` when absent.
    pub seq_len: Option<usize>,
}

/// Writes `entropy-<mode>.csv` and `stats-<mode>.kelab` per requested mode.
pub fn run_measure(args: &MeasureArgs, dir: &Path, force: bool) -> Result<Vec<EntropyReport>> {
    if args.modes.is_empty() {
        return Err(Error::Config(
            "at least one coefficient mode is required".into(),
        ));
    }
    if args.n_instances == 0 {
        return Err(Error::Config("n_instances must be positive".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::load(&args.vocab)?;
    check_vocab(&ckpt, &vocab, &file_digest(&args.vocab)?)?;
    let docs = load_corpus(&args.corpus)?;
    let seq_len = args.seq_len.unwrap_or(ckpt.config.max_seq_len);
    if seq_len > ckpt.config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {seq_len} exceeds the checkpoint's max_seq_len {}",
            ckpt.config.max_seq_len
        )));
    }
    let packed = tokenize_and_pack(&docs, &vocab, seq_len)?;
    let set = measurement_set(&packed, args.n_instances, args.seed);
    let set_id = format!(
        "{}:n={}:seed={}",
        args.corpus.display(),
        set.len(),
        args.seed
    );

    prepare_run_dir(dir, force)?;
    let mut record = RunRecord::new("measure", Some(args.seed));
    record.input("checkpoint", &args.checkpoint)?;
    record.input("corpus", &args.corpus)?;
    record.input("vocab", &args.vocab)?;
    record.source_meta = ckpt.meta.clone();
    record
        .settings
        .insert("n_instances".into(), args.n_instances.to_string());
    record
        .settings
        .insert("seq_len".into(), seq_len.to_string());
    let modes: Vec<&str> = args.modes.iter().map(|m| m.as_str()).collect();
    record.settings.insert("modes".into(), modes.join(","));
    record.write(dir)?;

    let mut reports = Vec::new();
    for &mode in &args.modes {
        let (stats, report) = measure(&ckpt, &set, mode, &set_id)?;
        write_reports(
            &dir.join(format!("entropy-{}.csv", mode.as_str())),
            std::slice::from_ref(&report),
        )?;
        stats.save(
            &dir.join(format!("stats-{}.kelab", mode.as_str())),
            &ckpt.config,
            ckpt.step,
            &[("measurement_set", &set_id)],
        )?;
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResuscitateArgs {
    pub checkpoint: PathBuf,
    pub stats: PathBuf,
    pub spec: ResuscitationSpec,
}

/// Writes the surgered `checkpoint.kelab` and `plan.csv`.
pub fn run_resuscitate(args: &ResuscitateArgs, dir: &Path, force: bool) -> Result<SurgeryPlan> {
    args.spec.validate()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (stats, header) = CoefficientStats::load(&args.stats)?;
    if header.config.n_layers != ckpt.config.n_layers
        || header.config.ffn_inner != ckpt.config.ffn_inner
    {
        return Err(Error::Validation(format!(
            "stats describe {} layers x {} coefficients, the checkpoint has {} x {}",
            header.config.n_layers,
            header.config.ffn_inner,
            ckpt.config.n_layers,
            ckpt.config.ffn_inner
        )));
    }
    let plan = plan_surgery(&stats, &args.spec, &args.stats.display().to_string())?;
    let out = apply_surgery(&ckpt, &plan)?;
    prepare_run_dir(dir, force)?;
    let mut record = RunRecord::new("resuscitate", None);
    record.input("checkpoint", &args.checkpoint)?;
    record.input("stats", &args.stats)?;
    record.source_meta = ckpt.meta.clone();
    record.settings.insert("p".into(), args.spec.p.to_string());
    record.settings.insert("q".into(), args.spec.q.to_string());
    if let Some(cap) = args.spec.multiplier_cap {
        record
            .settings
            .insert("multiplier_cap".into(), cap.to_string());
    }
    record.write(dir)?;
    save_checkpoint(&out, &dir.join("checkpoint.kelab"))?;
    plan.write_csv(&dir.join("plan.csv"))?;
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualArgs {
    pub checkpoint: PathBuf,
    /// Model whose probe and retention scores serve as the baseline; the
    /// starting checkpoint itself when absent.
    pub reference: Option<PathBuf>,
}

pub struct ContinualRun {
    pub report: MetricsReport,
    pub total_steps: u64,
    pub interval: u64,
    pub checkpoint: Checkpoint,
}

/// Continual training with probe and retention evaluation before and after.
///
/// Applies `cfg.resuscitation` to the starting checkpoint first when set; the
/// baseline scores then come from the unmodified checkpoint.
pub fn run_continual(
    cfg: &ExperimentConfig,
    args: &ContinualArgs,
    dir: &Path,
    force: bool,
) -> Result<ContinualRun> {
    cfg.validate()?;
    let source = load_checkpoint(&args.checkpoint)?;
    let reference = match &args.reference {
        Some(p) => load_checkpoint(p)?,
        None => source.clone(),
    };
    let data = Datasets::generate(cfg)?;
    prepare_run_dir(dir, force)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    data.save(&dir.join("data"))?;
    let vocab_sha = file_digest(&dir.join("data/vocab.txt"))?;
    check_vocab(&source, &data.vocab, &vocab_sha)?;
    check_vocab(&reference, &data.vocab, &vocab_sha)?;

    let mut record = RunRecord::new("continual", Some(cfg.seed));
    record.input("checkpoint", &args.checkpoint)?;
    if let Some(p) = &args.reference {
        record.input("reference", p)?;
    }
    record.source_meta = source.meta.clone();
    record
        .settings
        .insert("inject".into(), cfg.continual.inject.to_string());

    let mut start = source.clone();
    if let Some(spec) = &cfg.resuscitation {
        let packed = tokenize_and_pack(&data.pretrain, &data.vocab, cfg.data.seq_len)?;
        let set = measurement_set(&packed, cfg.measure.n_instances, cfg.seed);
        let (stats, _) = measure(&source, &set, cfg.measure.mode, "pretrain")?;
        let plan = plan_surgery(&stats, spec, "pretrain")?;
        plan.write_csv(&dir.join("plan.csv"))?;
        start = apply_surgery(&source, &plan)?;
        record
            .settings
            .insert("resusc_p".into(), spec.p.to_string());
        record
            .settings
            .insert("resusc_q".into(), spec.q.to_string());
    }
    for key in ["resusc_p", "resusc_q"] {
        if let Some(v) = start.meta.get(key) {
            record
                .settings
                .entry(key.to_string())
                .or_insert_with(|| v.clone());
        }
    }
    record.write(dir)?;

    let (pt_perf, pt_scores) = probe_performance(&reference, &data.probes, &data.vocab)?;
    let pt_ret = retention_performance(&reference, &data.retention, &data.vocab)?;
    info!("baseline: K = {:.4}, P = {:.4}", pt_perf.k, pt_ret.p);

    let packed = tokenize_and_pack(&data.continual, &data.vocab, cfg.data.seq_len)?;
    let plan = if cfg.continual.inject {
        InjectionPlan::from_corpus(&data.probes, cfg.continual.rounds)?
    } else {
        InjectionPlan::none()
    };
    let train_cfg = cfg.continual.train.train_config(cfg.seed);
    let outcome = continual_train(&start, &packed, &plan, &train_cfg, &data.vocab)?;
    info!(
        "continual: {} steps, injection every {}",
        outcome.total_steps, outcome.interval
    );

    let (cl_perf, cl_scores) = probe_performance(&outcome.checkpoint, &data.probes, &data.vocab)?;
    let cl_ret = retention_performance(&outcome.checkpoint, &data.retention, &data.vocab)?;
    let report = MetricsReport::new(&pt_perf, &cl_perf, &pt_ret, &cl_ret)?;
    info!(
        "after: K = {:.4}, P = {:.4}; A = {:.4}, F = {:.4}",
        cl_perf.k,
        cl_ret.p,
        report.get("a").unwrap_or(f64::NAN),
        report.get("f").unwrap_or(f64::NAN)
    );

    save_checkpoint(&outcome.checkpoint, &dir.join("checkpoint.kelab"))?;
    write_train_log(&dir.join("train_log.csv"), &outcome.log)?;
    write_audit(&dir.join("audit.csv"), &outcome.audit)?;
    write_probe_csv(&dir.join("probes.csv"), &pt_scores, &cl_scores)?;
    report.write(&dir.join("metrics.txt"))?;
    Ok(ContinualRun {
        report,
        total_steps: outcome.total_steps,
        interval: outcome.interval,
        checkpoint: outcome.checkpoint,
    })
}
