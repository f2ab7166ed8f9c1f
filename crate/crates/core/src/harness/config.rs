use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tasks::{TaskKind, TaskSpec};
use crate::baselines::{LatenConfig, SeekingConfig};
use crate::error::{Error, Result};
use crate::model::{LmConfig, TrainConfig};
use crate::transfer::TransferConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SEMALIGN_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Semalign,
    Seeking,
    Laten,
    /// Same layers and budget as `semalign`, optimizing only the output
    /// cosine term.
    OutputOnly,
    None,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Semalign,
        Method::Seeking,
        Method::Laten,
        Method::OutputOnly,
        Method::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Semalign => "semalign",
            Method::Seeking => "seeking",
            Method::Laten => "laten",
            Method::OutputOnly => "output_only",
            Method::None => "none",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::ConfigError(format!("unknown method {s:?}")))
    }
}

fn default_top_n() -> usize {
    1
}

fn default_attribution_size() -> usize {
    64
}

fn default_cka_size() -> usize {
    64
}

fn default_validation_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub teacher: LmConfig,
    pub student: LmConfig,
    pub task: TaskSpec,
    pub teacher_training: TrainConfig,
    pub student_training: TrainConfig,
    pub transfer: TransferConfig,
    #[serde(default)]
    pub seeking: SeekingConfig,
    #[serde(default)]
    pub laten: LatenConfig,
    pub method: Method,
    /// Number of critical teacher layers.
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    /// Training examples scored for attribution.
    #[serde(default = "default_attribution_size")]
    pub attribution_size: usize,
    /// Evaluation examples used for the resolution curves.
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    /// Evaluation examples pooled for CKA.
    #[serde(default = "default_cka_size")]
    pub cka_size: usize,
    /// Relative cut-off for the pseudoinverse; `None` uses the default.
    #[serde(default)]
    pub rcond: Option<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Teacher 8×128 (4 heads), student 4×64 (2 heads), shared vocabulary
    /// of 128, on `task`.
    pub fn default_for(task: TaskKind, seed: u64) -> Self {
        let vocab = 128;
        let seq_len = match task {
            TaskKind::Copy | TaskKind::Reverse => 5,
            TaskKind::ModularSum | TaskKind::SortDigits => 4,
        };
        let max_seq = 2 * seq_len + 2;
        let teacher_steps = match task {
            TaskKind::Copy | TaskKind::Reverse => 300,
            TaskKind::ModularSum | TaskKind::SortDigits => 600,
        };
        let mut cfg = ExperimentConfig {
            teacher: LmConfig::new(8, 128, 4, vocab, max_seq, 0),
            student: LmConfig::new(4, 64, 2, vocab, max_seq, 0),
            task: TaskSpec::new(task, vocab, seq_len, 0),
            teacher_training: TrainConfig::new(teacher_steps, 16, 1e-3, 0),
            student_training: TrainConfig::new(100, 16, 1e-3, 0),
            transfer: TransferConfig::default(),
            seeking: SeekingConfig::default(),
            laten: LatenConfig::default(),
            method: Method::Semalign,
            top_n: default_top_n(),
            attribution_size: default_attribution_size(),
            validation_size: default_validation_size(),
            cka_size: default_cka_size(),
            rcond: None,
            output_dir: None,
        };
        cfg.set_seed(seed);
        cfg
    }

    /// Derives every component seed from `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.teacher.seed = seed;
        self.student.seed = seed.wrapping_add(100);
        self.task.seed = seed.wrapping_add(200);
        self.teacher_training.seed = seed.wrapping_add(1);
        self.student_training.seed = seed.wrapping_add(2);
        self.transfer.seed = seed.wrapping_add(4);
        self.seeking.seed = seed.wrapping_add(4);
        self.laten.seed = seed.wrapping_add(4);
    }

    /// Checks cross-field constraints before any compute.
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        if self.teacher.vocab_size != self.student.vocab_size {
            return Err(Error::VocabMismatch {
                teacher: self.teacher.vocab_size,
                student: self.student.vocab_size,
            });
        }
        if self.task.vocab_size != self.teacher.vocab_size {
            return Err(Error::ConfigError(format!(
                "task vocabulary {} differs from the models' {}",
                self.task.vocab_size, self.teacher.vocab_size
            )));
        }
        if self.teacher.n_layers < self.student.n_layers {
            return Err(Error::ConfigError(
                "teacher must have at least as many layers as the student".into(),
            ));
        }
        if self.teacher.hidden_dim < self.student.hidden_dim {
            return Err(Error::ConfigError(
                "teacher must be at least as wide as the student".into(),
            ));
        }
        let need = self.task.example_len() - 1;
        if self.teacher.max_seq < need || self.student.max_seq < need {
            return Err(Error::ConfigError(format!("max_seq must cover {need} input positions")));
        }
        if self.top_n == 0 || self.top_n > self.teacher.n_layers {
            return Err(Error::ConfigError(format!(
                "top_n must lie in 1..={}",
                self.teacher.n_layers
            )));
        }
        if self.attribution_size == 0 || self.cka_size < 2 || self.validation_size == 0 {
            return Err(Error::ConfigError(
                "attribution, validation and CKA sizes must be positive".into(),
            ));
        }
        if self.transfer.student_layer_k.is_some_and(|k| k > self.student.n_layers) {
            return Err(Error::ConfigError(
                "transfer.student_layer_k exceeds the student depth".into(),
            ));
        }
        self.teacher_training.optimizer.validate()?;
        self.student_training.optimizer.validate()?;
        self.transfer.validate()?;
        self.task.validate()
    }

    /// Parses JSON, reporting the line and column of syntax and schema errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::ConfigError(format!("line {} column {}: {e}", e.line(), e.column())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ConfigError(m) => Error::ConfigError(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `output_dir`, else `$SEMALIGN_OUT`, else `semalign-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("semalign-out"))
    }
}
