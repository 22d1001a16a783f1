//! Config-driven pipeline commands behind the `graphs4` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use graphs4::dataio::{
    generate_synth, load_dataset, load_matrix, resample_linear, save_dataset, standardize, write_matrix_csv, Label,
    MatrixFormat, Sample, Split, SynthConfig,
};
use graphs4::evalx::{cv_harness, screen_tasks, CvResult, Excluded, ScreenReport};
use graphs4::graph_mixing::adaptive_adjacency;
use graphs4::model::{load_checkpoint, save_checkpoint, GraphS4Model, ModelConfig};
use graphs4::tasks::{NetworkPartition, TaskSpec};
use graphs4::training::gradcheck::{run_gradcheck, GradCheckConfig};
use graphs4::training::{argmax, finetune_cls, format_log, mix_seed, predict_cls, pretrain_ssl, LossConfig, TrainConfig};
use graphs4::Error;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

/// Validation failures exit with 1, everything else with 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Parse { .. } | Error::Format(_) | Error::Json(_) => CliError::Validation(e.to_string()),
            Error::NumericSingularity(_) | Error::State(_) | Error::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, repeats: 10 }
    }
}

/// Everything a run needs. `seed` replaces the seeds of the nested
/// configs, so one number controls all randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub dataset_id: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fields left out keep the fine-tuning defaults.
    #[serde(deserialize_with = "finetune_section")]
    pub finetune: TrainConfig,
    pub loss: LossConfig,
    /// Self-supervised tasks; empty means one network mask per partition network.
    pub tasks: Vec<TaskSpec>,
    pub synth: Option<SynthConfig>,
    /// Dataset manifest; defaults to the one written by `synth`.
    pub manifest: Option<PathBuf>,
    /// Network partition; defaults to the one written by `synth`.
    pub partition: Option<PathBuf>,
    pub standardize: bool,
    pub resample_to: Option<usize>,
    /// Task whose checkpoint initializes fine-tuning; none trains from scratch.
    pub finetune_from: Option<String>,
    pub cv: CvConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("run"),
            dataset_id: "dataset".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            loss: LossConfig::default(),
            tasks: Vec::new(),
            synth: None,
            manifest: None,
            partition: None,
            standardize: true,
            resample_to: None,
            finetune_from: None,
            cv: CvConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn finetune_section<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    let patch = serde_json::Map::deserialize(d)?;
    let mut merged = match serde_json::to_value(TrainConfig::finetune_default()).map_err(D::Error::custom)? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("TrainConfig serializes to an object"),
    };
    merged.extend(patch);
    serde_json::from_value(serde_json::Value::Object(merged)).map_err(D::Error::custom)
}

/// Parses a config document, naming the offending field path on error.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        validation(format!("config field `{path}`: {}", e.inner()))
    })
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

impl RunConfig {
    /// Applies the top-level seed to every nested config.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
        self.gradcheck.seed = self.seed;
        if let Some(s) = &mut self.synth {
            s.seed = self.seed;
        }
        self
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.output.join("synth")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output.join("checkpoints")
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.manifest.clone().or_else(|| self.synth.as_ref().map(|_| self.synth_dir().join("manifest.json")))
    }

    pub fn partition_path(&self) -> Option<PathBuf> {
        self.partition.clone().or_else(|| self.synth.as_ref().map(|_| self.synth_dir().join("partition.json")))
    }

    /// Checkpoint file of a task: `<network>.gs4m` for network masks.
    pub fn checkpoint_path(&self, task: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("{task}.gs4m"))
    }

    fn validate_common(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.loss.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if let Some(t) = self.resample_to {
            if t < 2 {
                return Err(validation("resample_to must be at least 2"));
            }
        }
        if self.cv.folds < 2 || self.cv.repeats == 0 {
            return Err(validation("cv.folds must be at least 2 and cv.repeats positive"));
        }
        Ok(())
    }

    fn require_file(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
        let path = path.ok_or_else(|| validation(format!("no {what} configured (set `{what}` or `synth`)")))?;
        if !path.is_file() {
            return Err(validation(format!("{what} not found: {}", path.display())));
        }
        Ok(path)
    }

    fn load_partition(&self) -> CliResult<NetworkPartition> {
        let path = Self::require_file(self.partition_path(), "partition")?;
        Ok(NetworkPartition::load(&path)?)
    }

    /// The configured tasks, or one network mask per partition network.
    pub fn task_list(&self, p: &NetworkPartition) -> CliResult<Vec<TaskSpec>> {
        let tasks = if self.tasks.is_empty() {
            p.names().into_iter().map(|n| TaskSpec::NetworkMask { target_network: n }).collect()
        } else {
            self.tasks.clone()
        };
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.name()) {
                return Err(validation(format!("task {:?} is listed twice", t.name())));
            }
        }
        Ok(tasks)
    }

    fn load_data(&self) -> CliResult<Vec<Sample>> {
        let path = Self::require_file(self.manifest_path(), "manifest")?;
        let mut data = load_dataset(&path)?;
        for s in &mut data {
            if let Some(t) = self.resample_to {
                s.x = resample_linear(&s.x, t)?;
            }
            if self.standardize {
                s.x = standardize(&s.x);
            }
        }
        if let Some(s) = data.first() {
            if s.x.nrows() != self.model.num_nodes {
                return Err(validation(format!(
                    "model.num_nodes is {} but the dataset has {} nodes",
                    self.model.num_nodes,
                    s.x.nrows()
                )));
            }
        }
        Ok(data)
    }

    fn require_checkpoints(&self, tasks: &[String]) -> CliResult<()> {
        for t in tasks {
            let path = self.checkpoint_path(t);
            if !path.is_file() {
                return Err(validation(format!("missing checkpoint {}", path.display())));
            }
        }
        Ok(())
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = ".graphs4.lock";

    pub fn acquire(output: &Path) -> CliResult<Self> {
        fs::create_dir_all(output).map_err(|e| validation(format!("output directory {} is not writable: {e}", output.display())))?;
        let path = output.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(validation(format!("another run holds {}; remove it if no run is active", path.display())))
            }
            Err(e) => Err(validation(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    fs::write(path, text).map_err(runtime)
}

fn store_checkpoint(model: &GraphS4Model, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    save_checkpoint(model, path).map_err(runtime)
}

fn split_of(data: &[Sample], split: Split) -> Vec<Sample> {
    data.iter().filter(|s| s.split == split).cloned().collect()
}

/// Generates the synthetic dataset and its partition under `<output>/synth`.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<String> {
    cfg.validate_common()?;
    let synth = cfg.synth.as_ref().ok_or_else(|| validation("`synth` section is required for the synth command"))?;
    let partition = synth.partition()?;
    let _lock = RunLock::acquire(&cfg.output)?;
    let data = generate_synth(synth)?;
    let dir = cfg.synth_dir();
    if dir.join("data").exists() {
        fs::remove_dir_all(dir.join("data")).map_err(runtime)?;
    }
    let manifest = save_dataset(&dir, &data, MatrixFormat::Binary)?;
    write_text(&dir.join("partition.json"), &(serde_json::to_string_pretty(&partition).map_err(runtime)? + "\n"))?;
    Ok(format!("wrote {} samples to {}\n", data.len(), manifest.display()))
}

/// Self-supervised pretraining, one checkpoint per task.
pub fn cmd_pretrain(cfg: &RunConfig) -> CliResult<String> {
    cfg.validate_common()?;
    let p = cfg.load_partition()?;
    let tasks = cfg.task_list(&p)?;
    let data = cfg.load_data()?;
    let t = data.first().map(|s| s.x.ncols()).ok_or_else(|| validation("dataset is empty"))?;
    for task in &tasks {
        task.validate(&p, t)?;
    }
    let population = split_of(&data, Split::Population);
    let healthy: Vec<Sample> = split_of(&data, Split::ClinicalSsTrain).into_iter().filter(|s| s.label == Label::Healthy).collect();
    if population.is_empty() && cfg.train.epochs_population > 0 {
        return Err(validation("dataset has no population samples"));
    }
    if healthy.len() < 2 {
        return Err(validation("dataset needs at least 2 healthy clinical_ss_train samples"));
    }
    let _lock = RunLock::acquire(&cfg.output)?;
    let mut out = String::new();
    for task in &tasks {
        let model = GraphS4Model::init(&cfg.model, cfg.seed)?;
        let res = pretrain_ssl(model, &population, &healthy, task, &p, &cfg.train, &cfg.loss)?;
        let name = task.name();
        store_checkpoint(&res.model, &cfg.checkpoint_path(&name))?;
        write_text(&cfg.output.join("logs").join(format!("{name}.tsv")), &format_log(&res.log))?;
        out.push_str(&format!(
            "{name}: inner-val loss {:.4} -> {:.4} after {} clinical epochs\n",
            res.initial_val_loss, res.best_val_loss, res.clinical_epochs
        ));
    }
    Ok(out)
}

fn load_task_models(cfg: &RunConfig, tasks: &[TaskSpec]) -> CliResult<Vec<(TaskSpec, GraphS4Model)>> {
    tasks
        .iter()
        .map(|t| {
            let m = load_checkpoint(&cfg.checkpoint_path(&t.name()))?;
            if m.config.num_nodes != cfg.model.num_nodes {
                return Err(validation(format!("checkpoint for {} has {} nodes", t.name(), m.config.num_nodes)));
            }
            Ok((t.clone(), m))
        })
        .collect()
}

/// Anomaly screen of every task on the clinical_ss_val split.
pub fn cmd_screen(cfg: &RunConfig) -> CliResult<ScreenReport> {
    cfg.validate_common()?;
    let p = cfg.load_partition()?;
    let tasks = cfg.task_list(&p)?;
    cfg.require_checkpoints(&tasks.iter().map(TaskSpec::name).collect::<Vec<_>>())?;
    let data = cfg.load_data()?;
    let val = split_of(&data, Split::ClinicalSsVal);
    let _lock = RunLock::acquire(&cfg.output)?;
    let models = load_task_models(cfg, &tasks)?;
    let report = screen_tasks(&models, &val, &p, &cfg.dataset_id)?;
    write_text(&cfg.output.join("screen_report.json"), &(report.to_json()? + "\n"))?;
    Ok(report)
}

/// Anomaly score of one sample file under every task.
pub fn cmd_score(cfg: &RunConfig, sample: &Path) -> CliResult<BTreeMap<String, f64>> {
    cfg.validate_common()?;
    let p = cfg.load_partition()?;
    let tasks = cfg.task_list(&p)?;
    cfg.require_checkpoints(&tasks.iter().map(TaskSpec::name).collect::<Vec<_>>())?;
    if !sample.is_file() {
        return Err(validation(format!("sample not found: {}", sample.display())));
    }
    let mut x = load_matrix(sample)?;
    if let Some(t) = cfg.resample_to {
        x = resample_linear(&x, t)?;
    }
    if cfg.standardize {
        x = standardize(&x);
    }
    let s = Sample { id: "input".into(), x, label: Label::Unlabeled, site: String::new(), split: Split::ClinicalCv };
    let mut out = BTreeMap::new();
    for (task, model) in load_task_models(cfg, &tasks)? {
        out.insert(task.name(), graphs4::evalx::anomaly_score(&model, &s, &task, &p)?);
    }
    Ok(out)
}

fn base_model(cfg: &RunConfig, seed: u64) -> CliResult<(GraphS4Model, TrainConfig)> {
    match &cfg.finetune_from {
        Some(task) => Ok((load_checkpoint(&cfg.checkpoint_path(task))?, TrainConfig { seed, ..cfg.finetune.clone() })),
        None => Ok((GraphS4Model::init(&cfg.model, seed)?, TrainConfig { seed, full_finetune: true, ..cfg.finetune.clone() })),
    }
}

fn check_finetune_source(cfg: &RunConfig) -> CliResult<()> {
    if let Some(task) = &cfg.finetune_from {
        cfg.require_checkpoints(std::slice::from_ref(task))?;
    }
    Ok(())
}

/// Supervised fine-tuning on the labeled clinical data (clinical_cv plus the
/// healthy clinical_ss_train samples).
pub fn cmd_finetune(cfg: &RunConfig) -> CliResult<String> {
    cfg.validate_common()?;
    check_finetune_source(cfg)?;
    let data = cfg.load_data()?;
    let labeled: Vec<Sample> = data
        .into_iter()
        .filter(|s| matches!(s.split, Split::ClinicalCv | Split::ClinicalSsTrain) && s.label != Label::Unlabeled)
        .collect();
    let _lock = RunLock::acquire(&cfg.output)?;
    let (model, tcfg) = base_model(cfg, cfg.seed)?;
    let res = finetune_cls(model, &labeled, &tcfg)?;
    store_checkpoint(&res.model, &cfg.checkpoint_path("classifier"))?;
    write_text(&cfg.output.join("logs").join("classifier.tsv"), &format_log(&res.log))?;
    Ok(format!(
        "classifier: inner-val balanced accuracy {:.4} after {} epochs\n",
        res.best_val_balanced_accuracy, res.epochs
    ))
}

/// Repeated stratified cross-validation of fine-tuning on the clinical data.
/// clinical_ss_val never takes part; clinical_ss_train only trains.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<CvResult> {
    cfg.validate_common()?;
    check_finetune_source(cfg)?;
    let data = cfg.load_data()?;
    let clinical: Vec<Sample> = data.into_iter().filter(|s| s.split != Split::Population).collect();
    let excluded = Excluded {
        ss_val: clinical.iter().filter(|s| s.split == Split::ClinicalSsVal).map(|s| s.id.clone()).collect(),
        ss_train: clinical.iter().filter(|s| s.split == Split::ClinicalSsTrain).map(|s| s.id.clone()).collect(),
    };
    let _lock = RunLock::acquire(&cfg.output)?;
    let mut train_fn = |train: &[Sample], test: &[Sample], seed: u64| {
        let (model, tcfg) = base_model(cfg, seed).map_err(|e| Error::State(e.to_string()))?;
        let res = finetune_cls(model, train, &tcfg)?;
        Ok(predict_cls(&res.model, test)?.into_iter().map(argmax).collect())
    };
    let result = cv_harness(&clinical, cfg.cv.folds, cfg.cv.repeats, &excluded, &mut train_fn, mix_seed(cfg.seed, 0xcf))?;
    write_text(&cfg.output.join("cv_result.json"), &(result.to_json()? + "\n"))?;
    Ok(result)
}

/// Finite-difference check of every gradient; fails when any exceeds tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<String> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    let text = report.to_string();
    if !report.passed() {
        return Err(CliError::Runtime(format!("gradient check failed\n{text}")));
    }
    Ok(text)
}

/// Writes the learned adjacency of a task's checkpoint as CSV to
/// `<output>/adjacency/<task>.csv`.
pub fn cmd_adjacency(cfg: &RunConfig, task: &str) -> CliResult<PathBuf> {
    cfg.validate_common()?;
    cfg.require_checkpoints(&[task.to_string()])?;
    let model = load_checkpoint(&cfg.checkpoint_path(task))?;
    let e = adaptive_adjacency(&model.emb);
    let path = cfg.output.join("adjacency").join(format!("{task}.csv"));
    fs::create_dir_all(path.parent().expect("has parent")).map_err(runtime)?;
    let f = File::create(&path).map_err(runtime)?;
    write_matrix_csv(&e.0, std::io::BufWriter::new(f))?;
    Ok(path)
}

/// Reads a config for the commands that take one.
pub fn read_config(path: &Path, output: Option<PathBuf>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(o) = output {
        cfg.output = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.resolved())
}

/// Parses a JSON file into `T`, used by tests and tools.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let f = File::open(path).map_err(|e| validation(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| validation(format!("{}: {e}", path.display())))
}
