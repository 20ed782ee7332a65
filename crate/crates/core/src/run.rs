//! On-disk run directory and the stages of the command-line tool.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml                  snapshot of the run configuration
//! corpus/manifest.json         config hash and corpus statistics
//! corpus/catalog.toml          claim catalog
//! corpus/vocab.txt             one token per line, id = line number
//! corpus/{train,valid,test}.jsonl
//! ckpt/lm.ckpt                 frozen language model
//! ckpt/prompt-<variant>.ckpt   prompt encoder per ablation variant
//! ckpt/navigator.ckpt          all-prefix claim classifier
//! ckpt/eval-classifier.ckpt    full-view claim classifier used for scoring
//! gen/<name>.jsonl             header line, then one generated view per test case
//! reports/<name>.{json,csv}    metric report of one generation run
//! reports/ablation.{csv,md}    the four ablation variants
//! reports/sweep-<param>.{csv,svg}
//! ```
//!
//! Every artifact records the config hash. Stages refuse inputs whose hash
//! differs from the current configuration's unless forced.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, RunConfig};
use crate::corpus::{read_cases, write_cases, ClaimCatalog, Split, Vocab};
use crate::eval::{MetricReport, CSV_HEADER};
use crate::lm::Lm;
use crate::navigator::{GuidanceSchedule, Objective, PrefixClassifier};
use crate::pipeline::{self, Dataset};
use crate::plot::{line_chart, Series};
use crate::prompt::{PromptEncoder, PromptFlags};
use crate::{Error, Result};

/// Handle on a run directory plus the active configuration.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub hash: String,
    /// Accept artifacts whose config hash differs.
    pub force: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusManifest {
    config_hash: String,
    train: usize,
    valid: usize,
    test: usize,
    vocab: usize,
}

/// First line of a generation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationHeader {
    pub config_hash: String,
    pub name: String,
    pub flags: String,
    pub schedule: GuidanceSchedule,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedView {
    id: String,
    view: String,
}

/// Trainable-parameter budget relative to the language model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBudget {
    pub lm: usize,
    pub prompt: usize,
    pub navigator: usize,
}

impl ParamBudget {
    pub fn ratio(&self) -> f64 {
        (self.prompt + self.navigator) as f64 / self.lm as f64
    }

    pub fn describe(&self) -> String {
        format!(
            "trainable parameters: prompt encoder {} + navigator {} = {} ({:.1}% of the {}-parameter language model)",
            self.prompt,
            self.navigator,
            self.prompt + self.navigator,
            100.0 * self.ratio(),
            self.lm
        )
    }
}

/// The four variants compared by `ablate`, in table order.
pub fn ablation_variants() -> [(&'static str, AblationFlags); 4] {
    [
        ("KIG", AblationFlags::default()),
        ("KIG w/o V", AblationFlags { no_keyword_init: true, ..Default::default() }),
        ("KIG w/o LA", AblationFlags { no_label_attention: true, ..Default::default() }),
        ("KIG w/o N", AblationFlags { no_navigator: true, ..Default::default() }),
    ]
}

fn prompt_variant(flags: PromptFlags) -> String {
    let d = flags.describe();
    if d.is_empty() { "kig".into() } else { d }
}

fn dependency(what: &str, path: &Path, command: &str) -> Error {
    Error::Dependency(format!("{what} not found at {}; run `kig {command}` first", path.display()))
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        Self { dir: dir.into(), cfg, hash, force: false }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir.join("corpus")
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.dir.join("ckpt").join(format!("{name}.ckpt"))
    }

    pub fn gen_path(&self, name: &str) -> PathBuf {
        self.dir.join("gen").join(format!("{name}.jsonl"))
    }

    pub fn report_path(&self, name: &str, ext: &str) -> PathBuf {
        self.dir.join("reports").join(format!("{name}.{ext}"))
    }

    fn ensure_dirs(&self) -> Result<()> {
        for sub in ["corpus", "ckpt", "gen", "reports"] {
            std::fs::create_dir_all(self.dir.join(sub))?;
        }
        std::fs::write(self.dir.join("config.toml"), self.cfg.to_toml())?;
        Ok(())
    }

    fn check_hash(&self, what: &str, found: Option<&str>) -> Result<()> {
        match found {
            Some(h) if h == self.hash => Ok(()),
            _ if self.force => {
                log::warn!("{what}: config hash {:?} differs from {}; continuing (forced)", found, self.hash);
                Ok(())
            }
            _ => Err(Error::Mismatch(format!(
                "{what} was produced under config hash {}, current config hash is {}; rerun the stage or pass --force",
                found.unwrap_or("(none)"),
                self.hash
            ))),
        }
    }

    /// The full configuration as one line of JSON.
    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serializes")
    }

    /// Metadata stored in every checkpoint: hash, seed and the full config.
    fn save_meta(&self) -> Vec<(&'static str, String)> {
        vec![("config_hash", self.hash.clone()), ("seed", self.cfg.seed.to_string()), ("config", self.config_json())]
    }

    // ---- data -------------------------------------------------------

    pub fn gen_data(&self) -> Result<Dataset> {
        self.ensure_dirs()?;
        let catalog = pipeline::load_catalog(&self.cfg)?;
        let split = pipeline::generate_split(&self.cfg)?;
        let ds = Dataset::from_split(catalog, split);
        let dir = self.corpus_dir();
        ds.catalog.save(dir.join("catalog.toml"))?;
        ds.vocab.save(dir.join("vocab.txt"))?;
        write_cases(dir.join("train.jsonl"), &ds.split.train, &ds.catalog)?;
        write_cases(dir.join("valid.jsonl"), &ds.split.valid, &ds.catalog)?;
        write_cases(dir.join("test.jsonl"), &ds.split.test, &ds.catalog)?;
        let manifest = CorpusManifest {
            config_hash: self.hash.clone(),
            train: ds.train.len(),
            valid: ds.valid.len(),
            test: ds.test.len(),
            vocab: ds.vocab.len(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest") + "\n")?;
        log::info!("corpus: {} / {} / {} cases, vocabulary {}", manifest.train, manifest.valid, manifest.test, manifest.vocab);
        Ok(ds)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let dir = self.corpus_dir();
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(dependency("corpus", &dir, "gen-data"));
        }
        let manifest: CorpusManifest =
            serde_json::from_str(&std::fs::read_to_string(&mpath)?).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        self.check_hash("corpus", Some(&manifest.config_hash))?;
        let catalog = ClaimCatalog::load(dir.join("catalog.toml"))?;
        let vocab = Vocab::load(dir.join("vocab.txt"))?;
        let split = Split {
            train: read_cases(dir.join("train.jsonl"), &catalog)?,
            valid: read_cases(dir.join("valid.jsonl"), &catalog)?,
            test: read_cases(dir.join("test.jsonl"), &catalog)?,
        };
        Ok(Dataset::with_vocab(catalog, split, vocab))
    }

    fn data_or_generate(&self) -> Result<Dataset> {
        if self.corpus_dir().join("manifest.json").exists() {
            self.load_data()
        } else {
            self.gen_data()
        }
    }

    // ---- language model ---------------------------------------------

    pub fn pretrain_lm(&self, ds: &Dataset) -> Result<Lm> {
        self.ensure_dirs()?;
        let lm = pipeline::pretrain_lm(&self.cfg, ds)?;
        let valid: Vec<Vec<usize>> = ds.valid.iter().map(|c| c.full_sequence().0).collect();
        let ppl = lm.perplexity(&valid)?;
        log::info!("language model: validation perplexity {ppl:.3} (vocabulary {})", ds.vocab.len());
        let meta = self.save_meta();
        let ppl = format!("{ppl:.6}");
        let mut m: Vec<(&str, &str)> = meta.iter().map(|(k, v)| (*k, v.as_str())).collect();
        m.push(("valid_perplexity", &ppl));
        lm.save(self.ckpt("lm"), &m)?;
        Ok(lm)
    }

    pub fn load_lm(&self) -> Result<Lm> {
        let p = self.ckpt("lm");
        if !p.exists() {
            return Err(dependency("language model", &p, "pretrain-lm"));
        }
        let ckpt = kig_tensor::Checkpoint::load(&p)?;
        self.check_hash("language model", ckpt.meta("config_hash"))?;
        let lm = Lm::from_checkpoint(&ckpt)?;
        if let Some(fp) = ckpt.meta("lm.fingerprint") {
            if fp != lm.fingerprint() {
                return Err(Error::LmNotFrozen { expected: fp.to_string(), found: lm.fingerprint() });
            }
        }
        Ok(lm)
    }

    fn lm_or_train(&self, ds: &Dataset) -> Result<Lm> {
        if self.ckpt("lm").exists() {
            self.load_lm()
        } else {
            self.pretrain_lm(ds)
        }
    }

    // ---- parameter budget -------------------------------------------

    pub fn param_budget(&self, ds: &Dataset, lm: &Lm) -> Result<ParamBudget> {
        let prompt = pipeline::new_prompt_encoder(&self.cfg, ds, lm, PromptFlags::default())?;
        let nav = pipeline::new_classifier(&self.cfg, ds, Objective::AllPrefixes)?;
        Ok(ParamBudget { lm: lm.num_params(), prompt: prompt.num_params(), navigator: nav.num_params() })
    }

    // ---- prompt encoder ---------------------------------------------

    pub fn train_prompt(&self, ds: &Dataset, lm: &Lm, flags: PromptFlags) -> Result<PromptEncoder> {
        self.ensure_dirs()?;
        log::info!("{}", self.param_budget(ds, lm)?.describe());
        let fp_before = lm.fingerprint();
        let examples = pipeline::prompt_examples(lm, &ds.train)?;
        let enc = pipeline::train_prompt(&self.cfg, ds, lm, flags, &examples)?;
        let valid = pipeline::prompt_examples(lm, &ds.valid)?;
        let loss = enc.mean_loss(lm, &valid)?;
        log::info!("prompt encoder ({}): validation view loss {loss:.4}", prompt_variant(flags));
        let meta = self.save_meta();
        let mut m: Vec<(&str, &str)> = meta.iter().map(|(k, v)| (*k, v.as_str())).collect();
        m.push(("lm_fingerprint", &fp_before));
        enc.save(self.ckpt(&format!("prompt-{}", prompt_variant(flags))), &m)?;
        Ok(enc)
    }

    pub fn load_prompt(&self, ds: &Dataset, lm: &Lm, flags: PromptFlags) -> Result<PromptEncoder> {
        let variant = prompt_variant(flags);
        let p = self.ckpt(&format!("prompt-{variant}"));
        if !p.exists() {
            let mut cmd = "train-prompt".to_string();
            if flags.no_keyword_init {
                cmd += " --no-keyword-init";
            }
            if flags.no_label_attention {
                cmd += " --no-label-attention";
            }
            return Err(dependency(&format!("prompt encoder ({variant})"), &p, &cmd));
        }
        let ckpt = kig_tensor::Checkpoint::load(&p)?;
        self.check_hash("prompt encoder", ckpt.meta("config_hash"))?;
        if let Some(fp) = ckpt.meta("lm_fingerprint") {
            if fp != lm.fingerprint() {
                return Err(Error::LmNotFrozen { expected: fp.to_string(), found: lm.fingerprint() });
            }
        }
        PromptEncoder::from_checkpoint(&ckpt, lm, &ds.catalog, &ds.vocab)
    }

    fn prompt_or_train(&self, ds: &Dataset, lm: &Lm, flags: PromptFlags) -> Result<PromptEncoder> {
        if self.ckpt(&format!("prompt-{}", prompt_variant(flags))).exists() {
            self.load_prompt(ds, lm, flags)
        } else {
            self.train_prompt(ds, lm, flags)
        }
    }

    // ---- classifiers ------------------------------------------------

    pub fn train_classifier(&self, ds: &Dataset, objective: Objective) -> Result<PrefixClassifier> {
        self.ensure_dirs()?;
        let stage = pipeline::classifier_stage(objective);
        if objective == Objective::AllPrefixes && self.ckpt("lm").exists() {
            let lm = self.load_lm()?;
            log::info!("{}", self.param_budget(ds, &lm)?.describe());
        }
        let c = pipeline::train_classifier(&self.cfg, ds, objective)?;
        let mif = pipeline::classifier_mif(&c, &ds.test)?;
        log::info!("{stage}: held-out gold-view Mi-F {:.2}", 100.0 * mif);
        let gate = if objective == Objective::AllPrefixes { 0.90 } else { 0.85 };
        if mif < gate {
            log::warn!("{stage}: Mi-F {:.2} is below the {:.0} gate; scores that depend on it are unreliable", 100.0 * mif, 100.0 * gate);
        }
        let meta = self.save_meta();
        let mif = format!("{mif:.6}");
        let mut m: Vec<(&str, &str)> = meta.iter().map(|(k, v)| (*k, v.as_str())).collect();
        m.push(("heldout_mif", &mif));
        c.save(self.ckpt(stage), &m)?;
        Ok(c)
    }

    pub fn load_classifier(&self, objective: Objective) -> Result<PrefixClassifier> {
        let stage = pipeline::classifier_stage(objective);
        let p = self.ckpt(stage);
        if !p.exists() {
            let cmd = if objective == Objective::AllPrefixes { "train-navigator" } else { "train-eval-classifier" };
            return Err(dependency(stage, &p, cmd));
        }
        let ckpt = kig_tensor::Checkpoint::load(&p)?;
        self.check_hash(stage, ckpt.meta("config_hash"))?;
        PrefixClassifier::from_checkpoint(&ckpt)
    }

    fn classifier_or_train(&self, ds: &Dataset, objective: Objective) -> Result<PrefixClassifier> {
        if self.ckpt(pipeline::classifier_stage(objective)).exists() {
            self.load_classifier(objective)
        } else {
            self.train_classifier(ds, objective)
        }
    }

    // ---- generation and evaluation ------------------------------------

    /// Generates views for the test split under `flags` and `schedule`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_with(
        &self,
        ds: &Dataset,
        lm: &Lm,
        prompt: &PromptEncoder,
        navigator: Option<&PrefixClassifier>,
        flags: AblationFlags,
        schedule: &GuidanceSchedule,
        name: &str,
    ) -> Result<Vec<Vec<usize>>> {
        self.ensure_dirs()?;
        let cap = pipeline::synth_config(&self.cfg).bounds()[2].1;
        let nav = if flags.no_navigator { None } else { navigator.map(|c| (c, schedule)) };
        let views = pipeline::generate_views(ds, lm, Some(prompt), nav, cap, &ds.test)?;
        let header = GenerationHeader {
            config_hash: self.hash.clone(),
            name: name.to_string(),
            flags: flags.label(),
            schedule: schedule.clone(),
            seed: self.cfg.seed,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(self.gen_path(name))?);
        writeln!(w, "{}", serde_json::to_string(&header).expect("header"))?;
        for (case, v) in ds.split.test.iter().zip(&views) {
            let row = GeneratedView { id: case.id.clone(), view: ds.vocab.detokenize(v) };
            writeln!(w, "{}", serde_json::to_string(&row).expect("row"))?;
        }
        w.flush()?;
        Ok(views)
    }

    /// `generate` stage: loads every prerequisite and writes `gen/<name>.jsonl`.
    pub fn generate(&self, name: &str) -> Result<()> {
        let ds = self.load_data()?;
        let lm = self.load_lm()?;
        let flags = self.cfg.ablation;
        let prompt = self.load_prompt(&ds, &lm, flags.prompt())?;
        let nav = if flags.no_navigator { None } else { Some(self.load_classifier(Objective::AllPrefixes)?) };
        self.generate_with(&ds, &lm, &prompt, nav.as_ref(), flags, &self.cfg.schedule, name)?;
        Ok(())
    }

    pub fn read_generations(&self, ds: &Dataset, name: &str) -> Result<(GenerationHeader, Vec<Vec<usize>>)> {
        let p = self.gen_path(name);
        if !p.exists() {
            return Err(dependency(&format!("generations {name:?}"), &p, "generate"));
        }
        let r = std::io::BufReader::new(std::fs::File::open(&p)?);
        let mut lines = r.lines();
        let bad = |e: String| Error::Format(format!("{}: {e}", p.display()));
        let header: GenerationHeader =
            serde_json::from_str(&lines.next().ok_or_else(|| bad("empty file".into()))??).map_err(|e| bad(e.to_string()))?;
        let mut views = Vec::new();
        for (line, case) in lines.zip(&ds.split.test) {
            let row: GeneratedView = serde_json::from_str(&line?).map_err(|e| bad(e.to_string()))?;
            if row.id != case.id {
                return Err(bad(format!("expected case {}, found {}", case.id, row.id)));
            }
            views.push(ds.vocab.tokenize(&row.view));
        }
        if views.len() != ds.test.len() {
            return Err(Error::Dependency(format!(
                "{} holds {} generations for {} test cases; rerun `kig generate`",
                p.display(),
                views.len(),
                ds.test.len()
            )));
        }
        Ok((header, views))
    }

    /// Scores `views` and writes `reports/<name>.{json,csv}`.
    pub fn report(&self, ds: &Dataset, judge: &PrefixClassifier, views: &[Vec<usize>], flags: &str, name: &str) -> Result<MetricReport> {
        self.ensure_dirs()?;
        let mut report = pipeline::evaluate_views(views, &ds.test, judge)?;
        report.seed = self.cfg.seed;
        report.flags = flags.to_string();
        report.meta.insert("config_hash".into(), self.hash.clone());
        report.meta.insert("name".into(), name.to_string());
        report.meta.insert("config".into(), self.config_json());
        if !report.judge_reliable() {
            log::warn!("eval classifier Mi-F on gold views is {:.2} (< 85); claim scores are unreliable", 100.0 * report.judge_mif);
        }
        std::fs::write(self.report_path(name, "json"), report.to_json())?;
        std::fs::write(self.report_path(name, "csv"), format!("{CSV_HEADER}\n{}\n", report.csv_row()))?;
        Ok(report)
    }

    /// `evaluate` stage.
    pub fn evaluate(&self, name: &str) -> Result<MetricReport> {
        let ds = self.load_data()?;
        let (header, views) = self.read_generations(&ds, name)?;
        self.check_hash(&format!("generations {name:?}"), Some(&header.config_hash))?;
        let judge = self.load_classifier(Objective::FullView)?;
        self.report(&ds, &judge, &views, &header.flags, name)
    }

    // ---- experiments ------------------------------------------------

    /// Everything an experiment needs, loaded or trained as required.
    pub fn prepare(&self) -> Result<(Dataset, Lm, PrefixClassifier, PrefixClassifier)> {
        let ds = self.data_or_generate()?;
        let lm = self.lm_or_train(&ds)?;
        let nav = self.classifier_or_train(&ds, Objective::AllPrefixes)?;
        let judge = self.classifier_or_train(&ds, Objective::FullView)?;
        Ok((ds, lm, nav, judge))
    }

    /// Runs the four ablation variants and writes `reports/ablation.{csv,md}`.
    pub fn ablate(&self) -> Result<Vec<(String, MetricReport)>> {
        let (ds, lm, nav, judge) = self.prepare()?;
        let mut rows = Vec::new();
        for (title, flags) in ablation_variants() {
            let prompt = self.prompt_or_train(&ds, &lm, flags.prompt())?;
            let name = format!("ablate-{}", flags.label());
            let views = self.generate_with(&ds, &lm, &prompt, Some(&nav), flags, &self.cfg.schedule, &name)?;
            let report = self.report(&ds, &judge, &views, &flags.label(), &name)?;
            rows.push((title.to_string(), report));
        }
        let mut csv = format!("variant,{CSV_HEADER}\n");
        for (title, r) in &rows {
            let _ = writeln!(csv, "{title},{}", r.csv_row());
        }
        std::fs::write(self.report_path("ablation", "csv"), csv)?;
        std::fs::write(self.report_path("ablation", "md"), markdown_table(&rows))?;
        Ok(rows)
    }

    /// Varies `lambda` or `k` over `values` with the full method and writes
    /// `reports/sweep-<param>.{csv,svg}`.
    pub fn sweep(&self, param: SweepParam, values: &[f64]) -> Result<Vec<(f64, MetricReport)>> {
        if values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        let (ds, lm, nav, judge) = self.prepare()?;
        let flags = AblationFlags::default();
        let prompt = self.prompt_or_train(&ds, &lm, flags.prompt())?;
        let mut rows = Vec::new();
        for &v in values {
            let mut schedule = self.cfg.schedule.clone();
            match param {
                SweepParam::Lambda => schedule.lambda = v,
                SweepParam::K => schedule.k = v,
            }
            schedule.validate()?;
            let name = format!("sweep-{}-{v}", param.name());
            let views = self.generate_with(&ds, &lm, &prompt, Some(&nav), flags, &schedule, &name)?;
            let label = format!("{}={v}", param.name());
            rows.push((v, self.report(&ds, &judge, &views, &label, &name)?));
        }
        let mut csv = format!("{},{CSV_HEADER}\n", param.name());
        for (v, r) in &rows {
            let _ = writeln!(csv, "{v},{}", r.csv_row());
        }
        std::fs::write(self.report_path(&format!("sweep-{}", param.name()), "csv"), csv)?;
        let series = ["Mi-F", "Ma-F", "Mi-J", "Ma-J"]
            .iter()
            .map(|&metric| Series {
                name: metric.to_string(),
                points: rows
                    .iter()
                    .map(|(v, r)| (*v, 100.0 * r.metrics().iter().find(|(n, _)| *n == metric).expect("metric").1))
                    .collect(),
            })
            .collect::<Vec<_>>();
        let title = format!("Claim response vs {}", param.symbol());
        std::fs::write(self.report_path(&format!("sweep-{}", param.name()), "svg"), line_chart(&title, param.symbol(), "score", &series))?;
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    K,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::K => "k",
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            SweepParam::Lambda => "λ",
            SweepParam::K => "k",
        }
    }

    /// Default sweep grid.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            SweepParam::K => vec![0.0, 25.0, 50.0, 75.0, 100.0],
        }
    }
}

/// Comparison table with one row per variant, scores ×100.
pub fn markdown_table(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::from("| Method | B-1 | B-2 | B-N | R-1 | R-2 | R-L | Mi-F | Ma-F | Mi-J | Ma-J |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for (title, r) in rows {
        let cells: Vec<String> = r.metrics().iter().map(|(_, v)| format!("{:.2}", 100.0 * v)).collect();
        let _ = writeln!(s, "| {title} | {} |", cells.join(" | "));
    }
    s
}
