//! The end-to-end experiment: warm-up, search, extraction, fine-tuning and
//! evaluation, with a full-width baseline and a uniform-pruning comparison.
//!
//! Artifacts written to `out_dir`:
//!
//! | file | stage |
//! |------|-------|
//! | `warmup.ckpt`, `warmup_history.json` | warm-up |
//! | `search.ckpt`, `history.json`, `history.csv`, `gates.json` | search |
//! | `plan.json` | extraction |
//! | `slim.ckpt`, `finetune.json` | fine-tuning |
//! | `baseline.ckpt`, `uniform.json` | comparisons |
//! | `report.json` or `report.csv` | end of run |

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FinetuneMode, Precision, ReportFormat};
use crate::data::{load_binary_dataset, make_synthetic, split_indices, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::extract::{derive_plan, extract_slim, uniform_plan_matching, SlimPlan};
use crate::model::{build_model, load_checkpoint, save_checkpoint, Checkpoint, Head, ModelSpec, Network};
use crate::rng::{Purpose, SeedTree};
use crate::search::{evaluate, expected_flops_at, search, train_weights, warmup, Metrics, SearchHistory};
use crate::tensor::Element;

/// Training and test data with the weight/gate split of the training set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    /// Weight-step samples (indices into `train`).
    pub d_train: Vec<usize>,
    /// Gate-step samples (indices into `train`).
    pub d_val: Vec<usize>,
    pub normalization: Normalization,
}

impl Prepared {
    pub fn all_train(&self) -> Vec<usize> {
        (0..self.train.len()).collect()
    }

    pub fn all_test(&self) -> Vec<usize> {
        (0..self.test.len()).collect()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig, seeds: &SeedTree) -> Result<Prepared> {
    let (mut train, mut test) = match &cfg.data_path {
        Some(path) => {
            let data = load_binary_dataset(path)?;
            match &cfg.test_data_path {
                Some(t) => (data, load_binary_dataset(t)?),
                None => {
                    let (tr, te) = split_indices(data.len(), 0.2, &mut seeds.fork(Purpose::TestData))?;
                    (data.subset(&tr)?, data.subset(&te)?)
                }
            }
        }
        None => {
            let all = make_synthetic(&cfg.synthetic_spec(), &mut seeds.fork(Purpose::Data))?;
            let tr: Vec<usize> = (0..cfg.n_train).collect();
            let te: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_test).collect();
            (all.subset(&tr)?, all.subset(&te)?)
        }
    };
    if (train.channels, train.height, train.width) != (test.channels, test.height, test.width) {
        return Err(Error::Config("training and test images differ in shape".into()));
    }
    let normalization = train.fit_normalization(&(0..train.len()).collect::<Vec<_>>())?;
    train.set_normalization(normalization.clone())?;
    test.set_normalization(normalization.clone())?;
    let (d_train, d_val) = split_indices(train.len(), cfg.val_fraction, &mut seeds.fork(Purpose::Split))?;
    Ok(Prepared {
        train,
        test,
        d_train,
        d_val,
        normalization,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub metrics: Metrics,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformReport {
    pub plan: SlimPlan,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub baseline: Option<ModelReport>,
    pub slim: ModelReport,
    pub uniform: Option<UniformReport>,
    pub unpruned_flops: u64,
    /// Noise-free expected FLOPs of the final gates at the final temperature.
    pub expected_flops: f64,
    pub predicted_flops: f64,
    pub true_flops: u64,
    pub prune_ratio: f64,
    pub plan: SlimPlan,
    pub normalization: Normalization,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

impl Report {
    /// `key,value` lines of the scalar fields.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.seed.to_string()),
            ("unpruned_flops".into(), self.unpruned_flops.to_string()),
            ("expected_flops".into(), self.expected_flops.to_string()),
            ("predicted_flops".into(), self.predicted_flops.to_string()),
            ("true_flops".into(), self.true_flops.to_string()),
            ("prune_ratio".into(), self.prune_ratio.to_string()),
        ];
        let mut metrics = |prefix: &str, m: &Metrics| {
            rows.push((format!("{prefix}_loss"), m.loss.to_string()));
            if let Some(a) = m.accuracy {
                rows.push((format!("{prefix}_accuracy"), a.to_string()));
            }
        };
        metrics("slim", &self.slim.metrics);
        if let Some(b) = &self.baseline {
            metrics("baseline", &b.metrics);
        }
        if let Some(u) = &self.uniform {
            metrics("uniform", &u.metrics);
        }
        for l in &self.plan.layers {
            rows.push((format!("chosen_c.{}", l.name), l.chosen_c.to_string()));
        }
        rows.push(("wall_time_s".into(), self.wall_time_s.to_string()));
        let mut out = String::from("key,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// JSON wrapper stamping an artifact with the run identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// One configured run. Stage methods are independent so the CLI can run
/// them one at a time; each uses its own random streams.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub seeds: SeedTree,
    pub data: Prepared,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedTree::new(cfg.seed);
        let data = prepare_data(&cfg, &seeds).map_err(|e| e.in_stage("data"))?;
        Ok(Experiment {
            hash: cfg.hash(),
            cfg,
            seeds,
            data,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.cfg.out_dir.join(file)
    }

    pub fn stamp<B>(&self, body: B) -> Stamped<B> {
        Stamped {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            body,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let d = &self.data.train;
        let head = match d.task() {
            crate::data::Task::Classify => Head::Classify {
                num_classes: d.num_classes,
            },
            crate::data::Task::Regress => Head::Regress { out_channels: 1 },
        };
        let mut spec = ModelSpec::new(self.cfg.arch, self.cfg.base_channels, d.channels, (d.height, d.width), head);
        spec.n_groups = self.cfg.n_groups;
        spec
    }

    pub fn checkpoint<T: Element>(&self, stage: &str, network: &Network<T>) -> Checkpoint<T> {
        Checkpoint {
            stage: stage.into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            network: network.clone(),
        }
    }

    pub fn save<T: Element>(&self, file: &str, stage: &str, network: &Network<T>) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        save_checkpoint(&self.path(file), &self.checkpoint(stage, network))
    }

    /// Loads a checkpoint written by this configuration.
    pub fn load<T: Element>(&self, file: &str) -> Result<Network<T>> {
        let ckpt: Checkpoint<T> = load_checkpoint(&self.path(file))?;
        if ckpt.config_hash != self.hash || ckpt.seed != self.cfg.seed {
            return Err(Error::State(format!(
                "{file} was written by config {} seed {}, not {} seed {}",
                ckpt.config_hash, ckpt.seed, self.hash, self.cfg.seed
            )));
        }
        Ok(ckpt.network)
    }

    pub fn init_supernet<T: Element>(&self) -> Result<Network<T>> {
        build_model(&self.model_spec(), &mut self.seeds.fork(Purpose::Init))
    }

    pub fn warmup_stage<T: Element>(&self) -> Result<(Network<T>, SearchHistory)> {
        let mut net = self.init_supernet::<T>()?;
        let mut history = SearchHistory::new(net.prunable_names());
        warmup(&mut net, &self.data.train, &self.data.d_train, &self.cfg.search_config(), &self.seeds, &mut history)?;
        Ok((net, history))
    }

    pub fn search_stage<T: Element>(&self, net: &mut Network<T>, history: &mut SearchHistory) -> Result<()> {
        let d = &self.data;
        search(net, &d.train, &d.d_train, &d.d_val, &self.cfg.search_config(), &self.seeds, history)
    }

    pub fn extract_stage<T: Element>(&self, net: &Network<T>) -> Result<SlimPlan> {
        derive_plan(net, self.cfg.tau_end)
    }

    fn train_and_eval<T: Element>(&self, net: &mut Network<T>, shuffle: Purpose, index: u64) -> Result<Metrics> {
        let all = self.data.all_train();
        train_weights(
            net,
            &self.data.train,
            &all,
            &self.cfg.train_schedule(),
            &mut self.seeds.fork_indexed(shuffle, index),
        )?;
        evaluate(net, &self.data.test, &self.data.all_test(), self.cfg.batch_size, self.cfg.tau_end)
    }

    fn slim_from<T: Element>(&self, supernet: &Network<T>, plan: &SlimPlan, index: u64) -> Result<Network<T>> {
        let inherit = self.cfg.finetune_mode == FinetuneMode::Inherit;
        extract_slim(supernet, plan, inherit, &mut self.seeds.fork_indexed(Purpose::FinetuneInit, index))
    }

    pub fn finetune_stage<T: Element>(&self, supernet: &Network<T>, plan: &SlimPlan) -> Result<(Network<T>, Metrics)> {
        let mut slim = self.slim_from(supernet, plan, 0)?;
        let metrics = self.train_and_eval(&mut slim, Purpose::FinetuneShuffle, 0)?;
        Ok((slim, metrics))
    }

    /// Uniformly pruned network at the predicted FLOPs of `plan`, extracted
    /// and trained exactly like the searched one.
    pub fn uniform_stage<T: Element>(&self, supernet: &Network<T>, plan: &SlimPlan) -> Result<UniformReport> {
        let uplan = uniform_plan_matching(supernet, plan.predicted_flops)?;
        let mut slim = self.slim_from(supernet, &uplan, 1)?;
        let metrics = self.train_and_eval(&mut slim, Purpose::FinetuneShuffle, 1)?;
        Ok(UniformReport { plan: uplan, metrics })
    }

    pub fn baseline_stage<T: Element>(&self) -> Result<(Network<T>, Metrics)> {
        let spec = self.model_spec();
        let full = spec.with_widths(spec.full_widths());
        let mut net = build_model(&full, &mut self.seeds.fork(Purpose::BaselineInit))?;
        let metrics = self.train_and_eval(&mut net, Purpose::BaselineShuffle, 0)?;
        Ok((net, metrics))
    }
}

fn stage<R>(name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

/// Last stage a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StopAfter {
    Warmup,
    Search,
    Extract,
    Finetune,
    All,
}

/// Runs every stage. With `resume`, stages whose artifacts already exist
/// (written by the same configuration) are loaded instead of recomputed.
pub fn run_pipeline(cfg: ExperimentConfig, resume: bool) -> Result<Report> {
    Ok(run_until(cfg, resume, StopAfter::All)?.expect("a full run produces a report"))
}

/// Runs stages up to and including `stop`; only a full run returns a report.
pub fn run_until(cfg: ExperimentConfig, resume: bool, stop: StopAfter) -> Result<Option<Report>> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, resume, stop),
        Precision::F64 => run_typed::<f64>(cfg, resume, stop),
    }
}

fn run_typed<T: Element>(cfg: ExperimentConfig, resume: bool, stop: StopAfter) -> Result<Option<Report>> {
    let start = Instant::now();
    let exp = Experiment::new(cfg)?;
    std::fs::create_dir_all(&exp.cfg.out_dir)?;
    let hash = exp.hash.clone();
    let seed = exp.cfg.seed;

    let have = |f: &str| resume && exp.path(f).exists();
    let (mut net, mut history) = stage("warmup", || {
        if have("warmup.ckpt") && have("warmup_history.json") {
            let h: Stamped<SearchHistory> = read_json(&exp.path("warmup_history.json"))?;
            return Ok((exp.load::<T>("warmup.ckpt")?, h.body));
        }
        let (net, history) = exp.warmup_stage::<T>()?;
        exp.save("warmup.ckpt", "warmup", &net)?;
        write_json(&exp.path("warmup_history.json"), &exp.stamp(history.clone()))?;
        Ok((net, history))
    })?;
    if stop == StopAfter::Warmup {
        return Ok(None);
    }

    stage("search", || {
        if have("search.ckpt") && have("history.json") {
            net = exp.load::<T>("search.ckpt")?;
            history = read_json::<Stamped<SearchHistory>>(&exp.path("history.json"))?.body;
            return Ok(());
        }
        exp.search_stage(&mut net, &mut history)?;
        exp.save("search.ckpt", "search", &net)?;
        write_json(&exp.path("history.json"), &exp.stamp(history.clone()))?;
        std::fs::write(exp.path("history.csv"), history.to_csv(&hash, seed))?;
        let gates: Vec<(String, Vec<f64>)> = net
            .prunable_names()
            .into_iter()
            .zip(net.gate_logits())
            .map(|(n, g)| (n, g.iter().map(|v| v.as_f64()).collect()))
            .collect();
        write_json(&exp.path("gates.json"), &exp.stamp(serde_json::json!({ "gates": gates })))?;
        Ok(())
    })?;
    if stop == StopAfter::Search {
        return Ok(None);
    }

    let plan = stage("extract", || {
        let plan = exp.extract_stage(&net)?;
        write_json(&exp.path("plan.json"), &exp.stamp(plan.clone()))?;
        Ok(plan)
    })?;
    if stop == StopAfter::Extract {
        return Ok(None);
    }

    let slim = stage("finetune", || {
        let (slim, metrics) = exp.finetune_stage(&net, &plan)?;
        exp.save("slim.ckpt", "finetune", &slim)?;
        let report = ModelReport {
            metrics,
            flops: slim.true_flops(),
        };
        write_json(&exp.path("finetune.json"), &exp.stamp(report.clone()))?;
        Ok(report)
    })?;
    if stop == StopAfter::Finetune {
        return Ok(None);
    }

    let baseline = if exp.cfg.train_baseline {
        Some(stage("baseline", || {
            let (base, metrics) = exp.baseline_stage::<T>()?;
            exp.save("baseline.ckpt", "baseline", &base)?;
            Ok(ModelReport {
                metrics,
                flops: base.true_flops(),
            })
        })?)
    } else {
        None
    };

    let uniform = if exp.cfg.uniform_baseline {
        Some(stage("uniform", || {
            let u = exp.uniform_stage(&net, &plan)?;
            write_json(&exp.path("uniform.json"), &exp.stamp(u.clone()))?;
            Ok(u)
        })?)
    } else {
        None
    };

    let report = Report {
        config_hash: hash.clone(),
        seed,
        baseline,
        slim,
        uniform,
        unpruned_flops: net.unpruned_flops()?,
        expected_flops: expected_flops_at(&net, exp.cfg.tau_end)?,
        predicted_flops: plan.predicted_flops,
        true_flops: plan.true_flops,
        prune_ratio: plan.prune_ratio,
        plan,
        normalization: exp.data.normalization.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        config: exp.cfg.clone(),
    };
    write_report(&exp.cfg.out_dir, &report, exp.cfg.report_format)?;
    Ok(Some(report))
}

pub fn write_report(dir: &Path, report: &Report, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => write_json(&dir.join("report.json"), report),
        ReportFormat::Csv => Ok(std::fs::write(dir.join("report.csv"), report.to_csv())?),
    }
}
