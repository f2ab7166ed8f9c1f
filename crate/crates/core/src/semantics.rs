//! Vocabulary-defined semantic bases and the decompose/recompose maps
//! between latent spaces.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Example, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::{self, default_rcond, gemm, svd, Matrix};
use crate::model::{checkpoint, forward_with_trace, LmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSide {
    Output,
    Input,
    Random,
}

impl BasisSide {
    pub const ALL: [BasisSide; 3] = [BasisSide::Output, BasisSide::Input, BasisSide::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            BasisSide::Output => "output",
            BasisSide::Input => "input",
            BasisSide::Random => "random",
        }
    }
}

impl fmt::Display for BasisSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BasisSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output" => Ok(BasisSide::Output),
            "input" => Ok(BasisSide::Input),
            "random" => Ok(BasisSide::Random),
            other => Err(Error::ConfigError(format!("unknown basis side `{other}`"))),
        }
    }
}

/// `D × m` matrix whose column `i` is the unit-norm basis for vocabulary
/// label `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticBasisSet {
    pub s: Matrix,
    pub side: BasisSide,
    pub source_model_id: String,
    pub rcond_used: f64,
    /// Rank of the head after truncation (output side), else `min(D, m)`.
    pub effective_rank: usize,
    /// Generator seed for random-side bases.
    pub seed: Option<u64>,
}

impl SemanticBasisSet {
    pub fn dim(&self) -> usize {
        self.s.rows()
    }

    pub fn n_atoms(&self) -> usize {
        self.s.cols()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.s.column(i)
    }

    /// SHA-256 over the side and exact basis values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.side.as_str().as_bytes());
        h.update((self.s.rows() as u64).to_le_bytes());
        h.update((self.s.cols() as u64).to_le_bytes());
        for v in self.s.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Wraps caller-supplied columns, normalizing each to unit length.
    pub fn from_columns(s: &Matrix, side: BasisSide, source_model_id: impl Into<String>) -> Result<Self> {
        let s = normalize_columns(s.transpose())?;
        Ok(SemanticBasisSet {
            effective_rank: s.rows().min(s.cols()),
            s,
            side,
            source_model_id: source_model_id.into(),
            rcond_used: 0.0,
            seed: None,
        })
    }
}

/// Normalizes each row of `rows_m` (`m × D`) and returns the transpose
/// (`D × m`).
fn normalize_columns(rows_m: Matrix) -> Result<Matrix> {
    let mut r = rows_m;
    for i in 0..r.rows() {
        let row = r.row_mut(i);
        let n = linalg::norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateBasis(format!("basis {i} has norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(r.transpose())
}

/// Output-side bases from a `D × v` LM head: row `i` of its pseudoinverse,
/// unit-normalized. `rcond` defaults to `1e-10 · max(D, v)`.
pub fn output_bases(lm_head: &Matrix, rcond: Option<f64>, source_model_id: &str) -> Result<SemanticBasisSet> {
    let rcond = rcond.unwrap_or_else(|| default_rcond(lm_head.rows(), lm_head.cols()));
    let dec = svd(lm_head, rcond)?;
    let rank = dec.rank();
    if rank < lm_head.rows().min(lm_head.cols()) {
        log::warn!(
            "lm head of {source_model_id} has effective rank {rank} of {}",
            lm_head.rows().min(lm_head.cols())
        );
    }
    let pinv = linalg::pseudoinverse(lm_head, rcond)?;
    Ok(SemanticBasisSet {
        s: normalize_columns(pinv)?,
        side: BasisSide::Output,
        source_model_id: source_model_id.into(),
        rcond_used: rcond,
        effective_rank: rank,
        seed: None,
    })
}

/// Input-side control: unit-normalized token-embedding rows.
pub fn input_bases(tok_emb: &Matrix, source_model_id: &str) -> Result<SemanticBasisSet> {
    Ok(SemanticBasisSet {
        s: normalize_columns(tok_emb.clone())?,
        side: BasisSide::Input,
        source_model_id: source_model_id.into(),
        rcond_used: 0.0,
        effective_rank: tok_emb.rows().min(tok_emb.cols()),
        seed: None,
    })
}

/// Random control: `m` Gaussian directions in `R^d`, unit-normalized.
pub fn random_bases(d: usize, m: usize, seed: u64, source_model_id: &str) -> Result<SemanticBasisSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Matrix::random_normal(&mut rng, m, d, 1.0);
    Ok(SemanticBasisSet {
        s: normalize_columns(raw)?,
        side: BasisSide::Random,
        source_model_id: source_model_id.into(),
        rcond_used: 0.0,
        effective_rank: d.min(m),
        seed: Some(seed),
    })
}

/// Bases of the requested side for a model. Random bases are seeded from
/// the model's config seed.
pub fn compute_bases(params: &LmParams, side: BasisSide, rcond: Option<f64>) -> Result<SemanticBasisSet> {
    let id = params.checksum();
    match side {
        BasisSide::Output => output_bases(&params.lm_head, rcond, &id),
        BasisSide::Input => input_bases(&params.tok_emb, &id),
        BasisSide::Random => random_bases(
            params.config.hidden_dim,
            params.config.vocab_size,
            params.config.seed ^ 0x5eed_ba5e,
            &id,
        ),
    }
}

/// Coefficients of a vector on a basis set: `aᵢ = cos(h, sᵢ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticCoefficients {
    pub a: Vec<f64>,
    pub source_norm: f64,
}

pub fn decompose(h: &[f64], bases: &SemanticBasisSet) -> Result<SemanticCoefficients> {
    if h.len() != bases.dim() {
        return Err(Error::shape(format!(
            "vector of length {} against bases of dimension {}",
            h.len(),
            bases.dim()
        )));
    }
    let n = linalg::norm(h);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut a = bases.s.matvec_t(h);
    a.iter_mut().for_each(|v| *v /= n);
    Ok(SemanticCoefficients { a, source_norm: n })
}

pub fn recompose(coeffs: &SemanticCoefficients, bases: &SemanticBasisSet) -> Result<Vec<f64>> {
    if coeffs.a.len() != bases.n_atoms() {
        return Err(Error::shape(format!(
            "{} coefficients against {} bases",
            coeffs.a.len(),
            bases.n_atoms()
        )));
    }
    Ok(bases.s.matvec(&coeffs.a))
}

fn check_vocab(teacher: &SemanticBasisSet, student: &SemanticBasisSet) -> Result<()> {
    if teacher.n_atoms() != student.n_atoms() {
        return Err(Error::VocabMismatch {
            teacher: teacher.n_atoms(),
            student: student.n_atoms(),
        });
    }
    Ok(())
}

/// Decomposes `h_teacher` on the teacher bases and recomposes the same
/// coefficients on the student bases.
pub fn cross_space_target(
    h_teacher: &[f64],
    s_teacher: &SemanticBasisSet,
    s_student: &SemanticBasisSet,
) -> Result<Vec<f64>> {
    check_vocab(s_teacher, s_student)?;
    recompose(&decompose(h_teacher, s_teacher)?, s_student)
}

/// Row-wise [`decompose`] followed by [`recompose`] for a `n × D_T` matrix.
/// Rows that are exactly zero map to zero rows and are reported in the
/// returned index list.
pub fn cross_space_rows(
    h: &Matrix,
    s_teacher: &SemanticBasisSet,
    s_student: &SemanticBasisSet,
) -> Result<(Matrix, Vec<usize>)> {
    check_vocab(s_teacher, s_student)?;
    if h.cols() != s_teacher.dim() {
        return Err(Error::shape(format!(
            "rows of width {} against bases of dimension {}",
            h.cols(),
            s_teacher.dim()
        )));
    }
    let mut unit = h.clone();
    let mut zeros = Vec::new();
    for i in 0..unit.rows() {
        let row = unit.row_mut(i);
        let n = linalg::norm(row);
        if n == 0.0 {
            zeros.push(i);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    let coeffs = unit.matmul(&s_teacher.s);
    let mut out = Matrix::zeros(h.rows(), s_student.dim());
    gemm(1.0, &coeffs, false, &s_student.s, true, 0.0, &mut out);
    Ok((out, zeros))
}

/// Index of the basis with the largest cosine to `h`; ties go to the lowest
/// index.
pub fn nearest_basis(h: &[f64], bases: &SemanticBasisSet) -> Result<usize> {
    let c = decompose(h, bases)?;
    let mut best = 0;
    for (i, &v) in c.a.iter().enumerate() {
        if v > c.a[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-layer mean recomposition cosine for each basis side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationCurve {
    pub model_id: String,
    pub dataset_id: String,
    /// 1-based layer numbers.
    pub layers: Vec<usize>,
    pub curves: BTreeMap<BasisSide, Vec<f64>>,
}

impl ValidationCurve {
    pub fn side(&self, side: BasisSide) -> Option<&[f64]> {
        self.curves.get(&side).map(Vec::as_slice)
    }
}

/// Mean over non-zero rows of `cos(h, S·Sᵀ·h/‖h‖)`.
pub fn mean_recomposition_cosine(h: &Matrix, bases: &SemanticBasisSet) -> Result<f64> {
    let (r, zeros) = cross_space_rows(h, bases, bases)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..h.rows() {
        if zeros.binary_search(&i).is_ok() {
            continue;
        }
        match linalg::cosine(h.row(i), r.row(i)) {
            Ok(c) => {
                total += c;
                count += 1;
            }
            Err(Error::ZeroVector) => {
                total += 0.0;
                count += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput("no non-zero hidden states".into()));
    }
    Ok(total / count as f64)
}

/// Decomposes and recomposes every layer's traced hidden states (all token
/// positions pooled) on each basis set and reports the mean cosine with the
/// original.
pub fn validate_resolution(
    params: &LmParams,
    dataset: &[Example],
    dataset_id: &str,
    bases: &[&SemanticBasisSet],
) -> Result<ValidationCurve> {
    if dataset.is_empty() {
        return Err(Error::DegenerateInput("validation set is empty".into()));
    }
    let mut per_layer: Vec<Vec<Matrix>> = vec![Vec::new(); params.config.n_layers];
    for chunk in dataset.chunks(64) {
        let batch = TokenBatch::from_examples(chunk)?;
        let trace = forward_with_trace(params, &batch)?;
        for (acc, h) in per_layer.iter_mut().zip(trace.per_layer) {
            acc.push(h);
        }
    }
    let stacked: Vec<Matrix> = per_layer
        .iter()
        .map(|parts| Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let mut curves = BTreeMap::new();
    for b in bases {
        let values = stacked
            .iter()
            .map(|h| mean_recomposition_cosine(h, b))
            .collect::<Result<Vec<_>>>()?;
        curves.insert(b.side, values);
    }
    Ok(ValidationCurve {
        model_id: params.checksum(),
        dataset_id: dataset_id.into(),
        layers: (1..=params.config.n_layers).collect(),
        curves,
    })
}

/// On-disk cache of basis sets keyed by model checksum, side and rcond.
#[derive(Clone, Debug)]
pub struct BasisCache {
    dir: PathBuf,
}

impl BasisCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        BasisCache { dir: dir.into() }
    }

    fn key_path(&self, model_checksum: &str, side: BasisSide, rcond: Option<f64>) -> PathBuf {
        let rc = rcond.map_or_else(|| "default".to_string(), |r| format!("{:016x}", r.to_bits()));
        let short = &model_checksum[..model_checksum.len().min(16)];
        self.dir.join(format!("bases-{short}-{side}-{rc}"))
    }

    /// Loads cached bases or computes and stores them.
    pub fn get_or_compute(&self, params: &LmParams, side: BasisSide, rcond: Option<f64>) -> Result<SemanticBasisSet> {
        let checksum = params.checksum();
        let base = self.key_path(&checksum, side, rcond);
        let json = base.with_extension("json");
        if json.exists() {
            if let Ok(b) = load_bases(&json) {
                if b.source_model_id == checksum {
                    return Ok(b);
                }
            }
        }
        let b = compute_bases(params, side, rcond)?;
        save_bases(&b, &base)?;
        // Reload so cached and fresh results carry identical values.
        load_bases(&json)
    }
}

pub fn save_bases(b: &SemanticBasisSet, base: &Path) -> Result<PathBuf> {
    let meta = serde_json::json!({
        "kind": "semantic_bases",
        "side": b.side,
        "rcond": b.rcond_used,
        "source_model_checksum": b.source_model_id,
        "effective_rank": b.effective_rank,
        "seed": b.seed,
    });
    checkpoint::save_tensors(base, &[("s".to_string(), &b.s)], meta)
}

/// Loads bases written by [`save_bases`], re-normalizing columns after the
/// `f32` round trip.
pub fn load_bases(json_path: &Path) -> Result<SemanticBasisSet> {
    let (manifest, mut tensors) = checkpoint::load_tensors(json_path)?;
    let meta = &manifest.metadata;
    let (_, s) = tensors
        .pop()
        .ok_or_else(|| Error::InvalidMatrix(format!("{} holds no tensor", json_path.display())))?;
    let side: BasisSide = serde_json::from_value(meta["side"].clone()).map_err(|e| Error::json(json_path, e))?;
    Ok(SemanticBasisSet {
        s: normalize_columns(s.transpose())?,
        side,
        source_model_id: meta["source_model_checksum"].as_str().unwrap_or_default().to_string(),
        rcond_used: meta["rcond"].as_f64().unwrap_or(0.0),
        effective_rank: meta["effective_rank"].as_u64().unwrap_or(0) as usize,
        seed: meta["seed"].as_u64(),
    })
}
