use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method};
use super::tasks::{evaluate_accuracy, generate_dataset, Dataset};
use crate::analysis::{cka_grid, compare_grids, emit_report, trace_dataset, CkaGrid, DeltaReport};
use crate::attribution::{attribute_dataset, LayerScore, PairingPlan};
use crate::baselines::{laten_transfer, seeking_transfer};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{train, CrossEntropy, LmConfig, LmParams, TrainConfig, TrainReport, TrainableMask};
use crate::semantics::{validate_resolution, BasisCache, BasisSide, SemanticBasisSet, ValidationCurve};
use crate::transfer::{run_transfer, TransferObjective, TransferResult};

/// Initializes from `config` and trains every parameter with cross-entropy.
/// The result is rounded to `f32`, so it equals its own checkpoint.
pub fn train_model(config: &LmConfig, data: &[Example], train_cfg: &TrainConfig) -> Result<(LmParams, TrainReport)> {
    let mut p = LmParams::init(config)?;
    let report = train(&mut p, data, &CrossEntropy, &TrainableMask::All, train_cfg)?;
    p.round_to_f32();
    Ok((p, report))
}

/// Output, input and random resolution curves for one model.
pub fn validation_curves(
    model: &LmParams,
    data: &[Example],
    dataset_id: &str,
    cache: &BasisCache,
    rcond: Option<f64>,
) -> Result<ValidationCurve> {
    let sets: Vec<SemanticBasisSet> = BasisSide::ALL
        .iter()
        .map(|&side| cache.get_or_compute(model, side, rcond))
        .collect::<Result<_>>()?;
    let refs: Vec<&SemanticBasisSet> = sets.iter().collect();
    validate_resolution(model, data, dataset_id, &refs)
}

/// Attribution on the teacher, then the pairing plan for a student of
/// depth `l_s`.
pub fn attribute_and_pair(
    teacher: &LmParams,
    data: &[Example],
    l_s: usize,
    top_n: usize,
) -> Result<(Vec<LayerScore>, PairingPlan)> {
    let scores = attribute_dataset(teacher, data, 64)?;
    let plan = PairingPlan::from_scores(&scores, l_s, top_n)?;
    Ok((scores, plan))
}

/// Applies `method` and returns the transferred student.
pub fn apply_method(
    config: &ExperimentConfig,
    teacher: &LmParams,
    student: &LmParams,
    plan: &PairingPlan,
    bases: (&SemanticBasisSet, &SemanticBasisSet),
    train_set: &[Example],
) -> Result<(LmParams, Option<TransferResult>)> {
    let (model, result) = match config.method {
        Method::None => return Ok((student.clone(), None)),
        Method::Semalign => run_transfer(
            teacher,
            student,
            plan,
            bases,
            train_set,
            &config.transfer,
            TransferObjective::SemAlign,
        )?,
        Method::OutputOnly => run_transfer(
            teacher,
            student,
            plan,
            bases,
            train_set,
            &config.transfer,
            TransferObjective::OutputOnly,
        )?,
        Method::Seeking => {
            let out = seeking_transfer(teacher, student, train_set, &config.seeking)?;
            (out.model, out.result)
        }
        Method::Laten => {
            let (m, _, r) = laten_transfer(teacher, student, train_set, &config.laten)?;
            (m, r)
        }
    };
    let mut model = model;
    model.round_to_f32();
    Ok((model, Some(result)))
}

/// Self and cross grids, before and after transfer, on block outputs.
pub fn cka_conditions(
    teacher: &LmParams,
    before: &LmParams,
    after: &LmParams,
    data: &[Example],
) -> Result<Vec<(String, CkaGrid)>> {
    let t = trace_dataset(teacher, data, 64)?;
    let b = trace_dataset(before, data, 64)?;
    let a = trace_dataset(after, data, 64)?;
    Ok(vec![
        (
            "self_before".into(),
            cka_grid(&b, &b, ("student", "student"), "before")?,
        ),
        ("self_after".into(), cka_grid(&a, &a, ("student", "student"), "after")?),
        (
            "cross_before".into(),
            cka_grid(&t, &b, ("teacher", "student"), "before")?,
        ),
        ("cross_after".into(), cka_grid(&t, &a, ("teacher", "student"), "after")?),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub teacher_acc: Option<f64>,
    pub student_before_acc: Option<f64>,
    pub student_after_acc: Option<f64>,
    pub teacher_final_loss: Option<f64>,
    pub student_final_loss: Option<f64>,
    pub critical_layers: Vec<usize>,
    pub cross_before_monotone: Option<f64>,
    pub cross_after_monotone: Option<f64>,
    pub cross_delta_frobenius: Option<f64>,
    pub output_side_min_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub stages_completed: Vec<String>,
    pub failed: Option<StageFailure>,
    pub artifacts: Vec<Artifact>,
    pub metrics: Metrics,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_checksum: Option<String>,
    /// Seconds per stage; not part of [`RunManifest::checksum`].
    pub timings: BTreeMap<String, f64>,
    /// Checksum of everything except timings and the output location.
    pub checksum: String,
}

impl RunManifest {
    pub fn compute_checksum(&self) -> String {
        let mut m = self.clone();
        m.timings.clear();
        m.checksum.clear();
        m.config.output_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&m).expect("manifest serializes")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Everything a pipeline run computed, for callers that need more than
/// the manifest.
#[derive(Clone, Debug, Default)]
pub struct PipelineOutputs {
    pub dataset: Option<Dataset>,
    pub teacher: Option<LmParams>,
    pub student_before: Option<LmParams>,
    pub student_after: Option<LmParams>,
    pub teacher_bases: Option<SemanticBasisSet>,
    pub student_bases: Option<SemanticBasisSet>,
    pub teacher_curve: Option<ValidationCurve>,
    pub scores: Vec<LayerScore>,
    pub plan: Option<PairingPlan>,
    pub transfer: Option<TransferResult>,
    pub grids: Vec<(String, CkaGrid)>,
    pub cross_delta: Option<DeltaReport>,
}

fn sha_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    out: PipelineOutputs,
}

impl Run {
    fn record(&mut self, name: &str, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        self.manifest.artifacts.push(Artifact {
            name: name.into(),
            path: rel.to_string_lossy().into_owned(),
            sha256: sha_file(path)?,
        });
        Ok(())
    }

    /// Saves a model checkpoint and records both files.
    fn save_model(&mut self, name: &str, model: &LmParams) -> Result<()> {
        let json = model.save(&self.dir.join(name))?;
        self.record(name, &json)?;
        self.record(&format!("{name}.bin"), &json.with_extension("bin"))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.record(name, &path)
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Run) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}");
        let r = f(self);
        self.manifest.timings.insert(name.into(), start.elapsed().as_secs_f64());
        match r {
            Ok(v) => {
                self.manifest.stages_completed.push(name.into());
                Ok(v)
            }
            Err(e) => Err(Error::Stage {
                stage: name.into(),
                source: Box::new(e),
            }),
        }
    }
}

fn stages(run: &mut Run) -> Result<()> {
    let cfg = run.manifest.config.clone();
    let data = run.stage("generate_dataset", |_| generate_dataset(&cfg.task))?;
    run.manifest.dataset_checksum = Some(data.checksum());
    run.out.dataset = Some(data.clone());
    let dataset_id = data.id();
    let teacher = run.stage("train_teacher", |r| {
        let (t, rep) = train_model(&cfg.teacher, &data.train, &cfg.teacher_training)?;
        r.manifest.metrics.teacher_final_loss = rep.final_loss();
        r.save_model("teacher", &t)?;
        Ok(t)
    })?;
    run.out.teacher = Some(teacher.clone());
    let student_pool = &data.train[..cfg.transfer.train_size.min(data.train.len())];
    let student = run.stage("train_student", |r| {
        let (s, rep) = train_model(&cfg.student, student_pool, &cfg.student_training)?;
        r.manifest.metrics.student_final_loss = rep.final_loss();
        r.save_model("student_before", &s)?;
        Ok(s)
    })?;
    run.out.student_before = Some(student.clone());
    let cache = BasisCache::new(run.dir.join("bases"));
    let (tb, sb) = run.stage("compute_bases", |r| {
        let tb = cache.get_or_compute(&teacher, BasisSide::Output, cfg.rcond)?;
        let sb = cache.get_or_compute(&student, BasisSide::Output, cfg.rcond)?;
        for (name, b) in [("teacher_bases", &tb), ("student_bases", &sb)] {
            let base = r.dir.join(name);
            let json = crate::semantics::save_bases(b, &base)?;
            r.record(name, &json)?;
            r.record(&format!("{name}.bin"), &json.with_extension("bin"))?;
        }
        Ok((tb, sb))
    })?;
    run.out.teacher_bases = Some(tb.clone());
    run.out.student_bases = Some(sb.clone());
    let val_set = &data.eval[..cfg.validation_size.min(data.eval.len())];
    let curves = run.stage("validate_semantics", |_| {
        let t = validation_curves(&teacher, val_set, &dataset_id, &cache, cfg.rcond)?;
        let s = validation_curves(&student, val_set, &dataset_id, &cache, cfg.rcond)?;
        Ok((t, s))
    })?;
    run.manifest.metrics.output_side_min_cosine = curves
        .0
        .side(BasisSide::Output)
        .map(|v| v.iter().copied().fold(f64::INFINITY, f64::min));
    run.out.teacher_curve = Some(curves.0.clone());
    let attr_set = &data.train[..cfg.attribution_size.min(data.train.len())];
    let (scores, plan) = run.stage("attribute_pair", |r| {
        let (scores, plan) = attribute_and_pair(&teacher, attr_set, cfg.student.n_layers, cfg.top_n)?;
        r.write_json("attribution", &scores)?;
        r.write_json("pairing", &plan)?;
        Ok((scores, plan))
    })?;
    run.manifest.metrics.critical_layers = plan.pairs.iter().map(|p| p.critical_teacher).collect();
    run.out.scores = scores;
    run.out.plan = Some(plan.clone());
    let (after, result) = run.stage("transfer", |r| {
        let (after, result) = apply_method(&cfg, &teacher, &student, &plan, (&tb, &sb), &data.train)?;
        r.save_model("student_after", &after)?;
        if let Some(res) = &result {
            r.write_json("transfer_result", res)?;
        }
        Ok((after, result))
    })?;
    run.out.student_after = Some(after.clone());
    run.out.transfer = result;
    run.stage("evaluate", |r| {
        let m = &mut r.manifest.metrics;
        m.teacher_acc = Some(evaluate_accuracy(&teacher, &data.eval)?);
        m.student_before_acc = Some(evaluate_accuracy(&student, &data.eval)?);
        m.student_after_acc = Some(if cfg.method == Method::None {
            m.student_before_acc.expect("just set")
        } else {
            evaluate_accuracy(&after, &data.eval)?
        });
        Ok(())
    })?;
    let cka_set = &data.eval[..cfg.cka_size.min(data.eval.len())];
    run.stage("analyze", |r| {
        let grids = cka_conditions(&teacher, &student, &after, cka_set)?;
        let get = |n: &str| &grids.iter().find(|(g, _)| g == n).expect("grid present").1;
        let delta = compare_grids(get("cross_before"), get("cross_after"))?;
        r.manifest.metrics.cross_before_monotone = Some(get("cross_before").monotone_fraction());
        r.manifest.metrics.cross_after_monotone = Some(get("cross_after").monotone_fraction());
        r.manifest.metrics.cross_delta_frobenius = Some(delta.frobenius);
        let grid_refs: Vec<(&str, &CkaGrid)> = grids.iter().map(|(n, g)| (n.as_str(), g)).collect();
        let report_dir = r.dir.join("report");
        let rep = emit_report(
            &report_dir,
            &grid_refs,
            &[("validation_teacher", &curves.0), ("validation_student", &curves.1)],
            serde_json::json!({
                "dataset": dataset_id,
                "cross_delta": {"max_abs": delta.max_abs, "frobenius": delta.frobenius},
            }),
        )?;
        for f in &rep.files {
            r.record(&format!("report/{}", f.name), &report_dir.join(&f.file))?;
        }
        r.record("report/manifest", &report_dir.join("report.json"))?;
        r.out.grids = grids.clone();
        r.out.cross_delta = Some(delta);
        Ok(())
    })?;
    Ok(())
}

fn seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    [
        ("teacher_init", cfg.teacher.seed),
        ("student_init", cfg.student.seed),
        ("task", cfg.task.seed),
        ("teacher_training", cfg.teacher_training.seed),
        ("student_training", cfg.student_training.seed),
        ("transfer", cfg.transfer.seed),
        ("seeking", cfg.seeking.seed),
        ("laten", cfg.laten.seed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Runs every stage in order and writes `manifest.json` to the run
/// directory. A failing stage is recorded in the manifest rather than
/// returned; only invalid configs and an unwritable directory are errors.
pub fn run_pipeline_with_outputs(config: &ExperimentConfig) -> Result<(RunManifest, PipelineOutputs)> {
    config.validate()?;
    let dir = config.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run {
        dir: dir.clone(),
        manifest: RunManifest {
            config: config.clone(),
            stages_completed: Vec::new(),
            failed: None,
            artifacts: Vec::new(),
            metrics: Metrics::default(),
            seeds: seeds(config),
            dataset_checksum: None,
            timings: BTreeMap::new(),
            checksum: String::new(),
        },
        out: PipelineOutputs::default(),
    };
    if let Err(e) = stages(&mut run) {
        let (stage, error) = match e {
            Error::Stage { stage, source } => (stage, source.to_string()),
            other => ("unknown".to_string(), other.to_string()),
        };
        log::error!("stage {stage} failed: {error}");
        run.manifest.failed = Some(StageFailure { stage, error });
    }
    run.manifest.checksum = run.manifest.compute_checksum();
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&run.manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((run.manifest, run.out))
}

pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunManifest> {
    run_pipeline_with_outputs(config).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tasks::TaskKind;

    /// A very small configuration that exercises every stage in seconds.
    pub(crate) fn tiny(method: Method, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_for(TaskKind::Copy, 5);
        cfg.teacher = LmConfig::new(3, 16, 2, 16, 8, 5);
        cfg.student = LmConfig::new(2, 8, 2, 16, 8, 6);
        cfg.task.vocab_size = 16;
        cfg.task.alphabet = 8;
        cfg.task.seq_len = 3;
        cfg.task.train_size = 64;
        cfg.task.eval_size = 32;
        cfg.teacher_training.steps = 10;
        cfg.student_training.steps = 5;
        cfg.transfer.steps = 5;
        cfg.transfer.align_size = 16;
        cfg.seeking.steps = 3;
        cfg.seeking.rank = 4;
        cfg.seeking.seed_size = 4;
        cfg.laten.steps = 3;
        cfg.laten.align_size = 8;
        cfg.attribution_size = 16;
        cfg.cka_size = 16;
        cfg.validation_size = 16;
        cfg.method = method;
        cfg.output_dir = Some(dir.to_path_buf());
        cfg
    }

    #[test]
    fn method_none_passes_the_student_through() {
        let d = tempfile::tempdir().unwrap();
        let (m, out) = run_pipeline_with_outputs(&tiny(Method::None, d.path())).unwrap();
        assert!(m.failed.is_none(), "{:?}", m.failed);
        let sha = |n: &str| m.artifacts.iter().find(|a| a.name == n).unwrap().sha256.clone();
        assert_eq!(sha("student_before.bin"), sha("student_after.bin"));
        assert_eq!(m.metrics.student_before_acc, m.metrics.student_after_acc);
        assert_eq!(
            out.student_before.unwrap().checksum(),
            out.student_after.unwrap().checksum()
        );
        for a in &m.artifacts {
            assert!(d.path().join(&a.path).exists(), "{}", a.path);
        }
        assert!(d.path().join("manifest.json").exists());
    }

    #[test]
    fn every_method_runs_and_reruns_identically() {
        for method in Method::ALL {
            let d1 = tempfile::tempdir().unwrap();
            let d2 = tempfile::tempdir().unwrap();
            let a = run_pipeline(&tiny(method, d1.path())).unwrap();
            let b = run_pipeline(&tiny(method, d2.path())).unwrap();
            assert!(a.failed.is_none(), "{method}: {:?}", a.failed);
            assert_eq!(a.checksum, b.checksum, "{method}");
            assert_eq!(a.stages_completed.len(), 9);
            let m = &a.metrics;
            for v in [m.teacher_acc, m.student_before_acc, m.student_after_acc] {
                assert!((0.0..=1.0).contains(&v.unwrap()));
            }
        }
    }

    #[test]
    fn invalid_config_fails_before_any_stage() {
        let d = tempfile::tempdir().unwrap();
        let mut bad = tiny(Method::Semalign, d.path());
        bad.task.alphabet = 40;
        assert!(matches!(run_pipeline(&bad), Err(Error::ConfigError(_))));
        assert!(!d.path().join("manifest.json").exists());
    }

    #[test]
    fn failing_stage_names_itself() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Method::Semalign, d.path());
        // The first update overflows.
        cfg.student_training.optimizer.learning_rate = f64::MAX;
        let m = run_pipeline(&cfg).unwrap();
        let f = m.failed.clone().expect("stage failure");
        assert_eq!(f.stage, "train_student");
        assert_eq!(m.stages_completed, vec!["generate_dataset", "train_teacher"]);
        let on_disk = RunManifest::load(&d.path().join("manifest.json")).unwrap();
        assert_eq!(on_disk, m);
    }
}
