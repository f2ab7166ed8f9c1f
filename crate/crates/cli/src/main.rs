use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semalign_core::analysis::{compare_grids, curve_csv, emit_report, CkaGrid};
use semalign_core::attribution::{LayerScore, PairingPlan};
use semalign_core::harness::{
    apply_method, attribute_and_pair, cka_conditions, evaluate_accuracy, generate_dataset, run_pipeline, train_model,
    validation_curves, Dataset, ExperimentConfig, Method, TaskKind,
};
use semalign_core::semantics::{compute_bases, load_bases, save_bases, BasisCache, BasisSide, SemanticBasisSet};
use semalign_core::{Error, LmParams};

#[derive(Parser, Debug)]
#[command(
    name = "semalign",
    version,
    about = "Cross-scale semantic alignment between toy language models"
)]
struct Cli {
    /// Experiment config (JSON). Defaults to the built-in config for `--task`.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory. Falls back to the config, then $SEMALIGN_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Task for the built-in config when no `--config` is given.
    #[arg(long, global = true, default_value = "copy")]
    task: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher on the task and save `teacher`.
    TrainTeacher,
    /// Train the baseline student and save `student_before`.
    TrainStudent,
    /// Compute output-side semantic bases for both models.
    ComputeBases,
    /// Per-layer recomposition cosines on output, input and random bases.
    ValidateSemantics,
    /// Score teacher layers and write the pairing plan.
    Attribute,
    /// Print the layer pairing for a teacher/student depth pair.
    Pair {
        #[arg(long)]
        lt: Option<usize>,
        #[arg(long)]
        ls: Option<usize>,
        /// Critical teacher layers (comma separated).
        #[arg(long, value_delimiter = ',')]
        critical: Vec<usize>,
    },
    /// Semantic alignment of the paired student layer; saves `student_after`.
    Transfer {
        /// Optimize only the output cosine term.
        #[arg(long)]
        output_only: bool,
    },
    /// Run a baseline transfer method; saves `student_after`.
    Baseline {
        #[arg(long, value_enum)]
        method: Baseline,
    },
    /// Exact-match accuracy of every saved model.
    Evaluate,
    /// CKA grids (self and cross, before and after) under `report/`.
    Analyze,
    /// Full pipeline; writes `manifest.json`.
    Run {
        /// Overrides the config's method.
        #[arg(long)]
        method: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Seeking,
    Laten,
    OutputOnly,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ConfigError(_) | Error::VocabMismatch { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => {
            let task: TaskKind = cli.task.parse()?;
            ExperimentConfig::default_for(task, cli.seed.unwrap_or(0))
        }
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Workspace {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Workspace {
    fn open(cli: &Cli) -> CliResult<Self> {
        let cfg = load_config(cli)?;
        let dir = cfg.resolved_output_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Workspace { cfg, dir })
    }

    fn dataset(&self) -> CliResult<Dataset> {
        Ok(generate_dataset(&self.cfg.task)?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn model(&self, name: &str, made_by: &str) -> CliResult<LmParams> {
        let path = self.path(&format!("{name}.json"));
        if !path.exists() {
            return Err(Failure::Runtime(format!(
                "{} not found; run `semalign {made_by}` first",
                path.display()
            )));
        }
        Ok(LmParams::load(&path)?)
    }

    fn bases(&self, name: &str, model: &LmParams) -> CliResult<SemanticBasisSet> {
        let path = self.path(&format!("{name}.json"));
        if path.exists() {
            return Ok(load_bases(&path)?);
        }
        let b = compute_bases(model, BasisSide::Output, self.cfg.rcond)?;
        save_bases(&b, &self.path(name))?;
        Ok(b)
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let path = self.path(&format!("{name}.json"));
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn plan(&self, teacher: &LmParams, data: &Dataset) -> CliResult<PairingPlan> {
        let path = self.path("pairing.json");
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return Ok(PairingPlan::from_json(&text)?);
        }
        let (_, plan) = self.attribute(teacher, data)?;
        Ok(plan)
    }

    fn attribute(&self, teacher: &LmParams, data: &Dataset) -> CliResult<(Vec<LayerScore>, PairingPlan)> {
        let n = self.cfg.attribution_size.min(data.train.len());
        let (scores, plan) = attribute_and_pair(teacher, &data.train[..n], self.cfg.student.n_layers, self.cfg.top_n)?;
        self.write_json("attribution", &scores)?;
        self.write_json("pairing", &plan)?;
        Ok((scores, plan))
    }

    fn transfer(&self, method: Method) -> CliResult {
        let data = self.dataset()?;
        let teacher = self.model("teacher", "train-teacher")?;
        let student = self.model("student_before", "train-student")?;
        let tb = self.bases("teacher_bases", &teacher)?;
        let sb = self.bases("student_bases", &student)?;
        let plan = self.plan(&teacher, &data)?;
        let cfg = ExperimentConfig {
            method,
            ..self.cfg.clone()
        };
        let (after, result) = apply_method(&cfg, &teacher, &student, &plan, (&tb, &sb), &data.train)?;
        let path = after.save(&self.path("student_after"))?;
        if let Some(r) = &result {
            self.write_json("transfer_result", r)?;
            if let Some(reason) = &r.aborted {
                eprintln!("warning: transfer aborted: {reason}");
            }
            println!("method {method}: trained student layers {:?}", r.student_layers);
            if let (Some(first), Some(last)) = (r.loss_curve.first(), r.loss_curve.last()) {
                println!("objective {first:.6} -> {last:.6} over {} steps", r.loss_curve.len());
            }
        }
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn train(ws: &Workspace, teacher: bool) -> CliResult {
    let data = ws.dataset()?;
    let cfg = &ws.cfg;
    let (name, lm, tc, pool) = if teacher {
        ("teacher", &cfg.teacher, &cfg.teacher_training, &data.train[..])
    } else {
        let n = cfg.transfer.train_size.min(data.train.len());
        ("student_before", &cfg.student, &cfg.student_training, &data.train[..n])
    };
    let (model, report) = train_model(lm, pool, tc)?;
    let path = model.save(&ws.path(name))?;
    if let Some(loss) = report.final_loss() {
        println!("{name}: final training loss {loss:.6}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn print_pairing(plan: &PairingPlan) {
    println!("student_k\tteacher_layer\tlo\thi\tlambda");
    for e in &plan.entries {
        println!("{}\t{}\t{}\t{}\t{}", e.student_k, e.teacher_base, e.lo, e.hi, e.lambda);
    }
    for p in &plan.pairs {
        println!(
            "critical teacher layer {} -> student layer {}",
            p.critical_teacher, p.student_k
        );
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Pair { lt, ls, critical } => {
            let (lt, ls) = match (lt, ls) {
                (Some(t), Some(s)) => (*t, *s),
                _ => {
                    let cfg = load_config(cli)?;
                    (lt.unwrap_or(cfg.teacher.n_layers), ls.unwrap_or(cfg.student.n_layers))
                }
            };
            if ls > lt {
                return Err(Failure::Usage(format!("--ls {ls} exceeds --lt {lt}")));
            }
            let plan = PairingPlan::from_critical(lt, ls, critical)?;
            print_pairing(&plan);
            Ok(())
        }
        Command::TrainTeacher => train(&Workspace::open(cli)?, true),
        Command::TrainStudent => train(&Workspace::open(cli)?, false),
        Command::ComputeBases => {
            let ws = Workspace::open(cli)?;
            for (name, model, made_by) in [
                ("teacher", "teacher", "train-teacher"),
                ("student", "student_before", "train-student"),
            ] {
                let m = ws.model(model, made_by)?;
                let b = compute_bases(&m, BasisSide::Output, ws.cfg.rcond)?;
                let path = save_bases(&b, &ws.path(&format!("{name}_bases")))?;
                println!(
                    "{name}: {} atoms in {} dims, sha256 {}",
                    b.n_atoms(),
                    b.dim(),
                    b.checksum()
                );
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::ValidateSemantics => {
            let ws = Workspace::open(cli)?;
            let data = ws.dataset()?;
            let n = ws.cfg.validation_size.min(data.eval.len());
            let cache = BasisCache::new(ws.path("bases"));
            let report = ws.path("report");
            fs::create_dir_all(&report).map_err(|e| Error::io(&report, e))?;
            for (name, made_by) in [("teacher", "train-teacher"), ("student_before", "train-student")] {
                let m = ws.model(name, made_by)?;
                let curve = validation_curves(&m, &data.eval[..n], &data.id(), &cache, ws.cfg.rcond)?;
                for (side, values) in &curve.curves {
                    let cells: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
                    println!("{name} {side}: {}", cells.join(" "));
                }
                let path = report.join(format!("validation_{name}.csv"));
                fs::write(&path, curve_csv(&curve)?).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Attribute => {
            let ws = Workspace::open(cli)?;
            let data = ws.dataset()?;
            let teacher = ws.model("teacher", "train-teacher")?;
            let (scores, plan) = ws.attribute(&teacher, &data)?;
            for s in &scores {
                println!("layer {}\t{:.6e}", s.layer_index, s.score);
            }
            print_pairing(&plan);
            Ok(())
        }
        Command::Transfer { output_only } => {
            let method = if *output_only {
                Method::OutputOnly
            } else {
                Method::Semalign
            };
            Workspace::open(cli)?.transfer(method)
        }
        Command::Baseline { method } => {
            let m = match method {
                Baseline::Seeking => Method::Seeking,
                Baseline::Laten => Method::Laten,
                Baseline::OutputOnly => Method::OutputOnly,
            };
            Workspace::open(cli)?.transfer(m)
        }
        Command::Evaluate => {
            let ws = Workspace::open(cli)?;
            let data = ws.dataset()?;
            let mut acc = serde_json::Map::new();
            for name in ["teacher", "student_before", "student_after"] {
                if !ws.path(&format!("{name}.json")).exists() {
                    continue;
                }
                let m = LmParams::load(&ws.path(&format!("{name}.json")))?;
                acc.insert(name.into(), evaluate_accuracy(&m, &data.eval)?.into());
            }
            if acc.is_empty() {
                return Err(Failure::Runtime(format!("no checkpoints in {}", ws.dir.display())));
            }
            let path = ws.write_json("accuracy", &acc)?;
            println!("{}", serde_json::Value::Object(acc));
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Analyze => {
            let ws = Workspace::open(cli)?;
            let data = ws.dataset()?;
            let teacher = ws.model("teacher", "train-teacher")?;
            let before = ws.model("student_before", "train-student")?;
            let after = ws.model("student_after", "transfer")?;
            let n = ws.cfg.cka_size.min(data.eval.len());
            let grids = cka_conditions(&teacher, &before, &after, &data.eval[..n])?;
            let get = |n: &str| &grids.iter().find(|(g, _)| g == n).expect("grid present").1;
            let delta = compare_grids(get("cross_before"), get("cross_after"))?;
            let refs: Vec<(&str, &CkaGrid)> = grids.iter().map(|(n, g)| (n.as_str(), g)).collect();
            let dir = ws.path("report");
            emit_report(
                &dir,
                &refs,
                &[],
                serde_json::json!({
                    "dataset": data.id(),
                    "cross_delta": {"max_abs": delta.max_abs, "frobenius": delta.frobenius},
                }),
            )?;
            for (name, g) in &grids {
                println!(
                    "{name}: row argmax {:?}, monotone {:.3}",
                    g.row_argmax(),
                    g.monotone_fraction()
                );
            }
            println!("cross before/after Frobenius distance {:.6}", delta.frobenius);
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Run { method } => {
            let mut cfg = load_config(cli)?;
            if let Some(m) = method {
                cfg.method = m.parse()?;
            }
            let manifest = run_pipeline(&cfg)?;
            let path = cfg.resolved_output_dir().join("manifest.json");
            println!(
                "{}",
                serde_json::to_string_pretty(&manifest.metrics).expect("metrics serialize")
            );
            println!("wrote {}", path.display());
            match manifest.failed {
                Some(f) => Err(Failure::Runtime(format!("stage {} failed: {}", f.stage, f.error))),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("semalign: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("semalign: {m}");
            ExitCode::FAILURE
        }
    }
}
