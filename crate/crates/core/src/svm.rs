//! Multiclass linear SVM: one-vs-rest, hinge loss, stochastic subgradient
//! descent.
//!
//! Each class `c` gets its own binary problem with `y = +1` for class `c`
//! and `-1` otherwise, minimizing
//!
//! ```text
//! λ/2 ‖w‖² + mean_i max(0, 1 − y_i (w·x_i + b))
//! ```
//!
//! by per-sample steps with `η_t = η₀ / (1 + λ t)`, visiting samples in a
//! freshly shuffled order every epoch. The bias is not regularized. Class
//! `c` shuffles with stream `c` of the seed, so the six problems are
//! independent and can train in parallel.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::splits::GrowthPattern;

const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-scoring fit on training data only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Already floored at 1e-8.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("cannot standardize zero rows"))?;
        let dim = first.len();
        check_rows(rows, dim)?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

fn check_rows(rows: &[Vec<f64>], dim: usize) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::invalid(format!(
                "row {i} has {} features, expected {dim}",
                r.len()
            )));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("row {i} feature {j} is not finite")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmHyperparams {
    pub epochs: usize,
    pub eta0: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for SvmHyperparams {
    fn default() -> Self {
        SvmHyperparams {
            epochs: 200,
            eta0: 0.1,
            lambda: 1e-3,
            seed: 0,
        }
    }
}

/// One-vs-rest weights, rows in [`GrowthPattern::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub hyper: SvmHyperparams,
}

/// Per-class margins, indexed by [`GrowthPattern::index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreVector(pub [f64; GrowthPattern::COUNT]);

impl ScoreVector {
    /// Highest margin; ties go to the lowest class index.
    pub fn argmax(&self) -> GrowthPattern {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        GrowthPattern::ALL[best]
    }
}

/// Regularized hinge objective of one binary problem.
pub fn objective(w: &[f64], b: f64, x: &[Vec<f64>], y: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * dot(w, w);
    let loss: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| (1.0 - yi * (dot(w, xi) + b)).max(0.0))
        .sum();
    reg + loss / x.len() as f64
}

/// Subgradient of `λ/2‖w‖² + max(0, 1 − y(w·x + b))` for a single sample.
/// At the hinge point the loss term contributes zero.
pub fn sample_subgradient(w: &[f64], b: f64, x: &[f64], y: f64, lambda: f64) -> (Vec<f64>, f64) {
    let active = y * (dot(w, x) + b) < 1.0;
    let gw = w
        .iter()
        .zip(x)
        .map(|(wj, xj)| lambda * wj - if active { y * xj } else { 0.0 })
        .collect();
    (gw, if active { -y } else { 0.0 })
}

/// Subgradient of [`objective`]: the mean of per-sample subgradients.
pub fn subgradient(w: &[f64], b: f64, x: &[Vec<f64>], y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let (g, h) = sample_subgradient(w, b, xi, yi, lambda);
        gw.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        gb += h;
    }
    gw.iter_mut().for_each(|a| *a /= n);
    (gw, gb / n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weights, bias and the objective after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective_trace: Vec<f64>,
}

/// Trains one binary problem; `stream_id` selects the shuffle stream.
pub fn fit_binary(x: &[Vec<f64>], y: &[f64], hyper: &SvmHyperparams, stream_id: u64, trace: bool) -> BinaryFit {
    let dim = x.first().map_or(0, Vec::len);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut rng = rng::stream(hyper.seed, stream_id);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut t = 0u64;
    let mut objective_trace = Vec::new();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = hyper.eta0 / (1.0 + hyper.lambda * t as f64);
            let (gw, gb) = sample_subgradient(&w, b, &x[i], y[i], hyper.lambda);
            w.iter_mut().zip(gw).for_each(|(wj, g)| *wj -= eta * g);
            b -= eta * gb;
            t += 1;
        }
        if trace {
            objective_trace.push(objective(&w, b, x, y, hyper.lambda));
        }
    }
    BinaryFit {
        weights: w,
        bias: b,
        objective_trace,
    }
}

fn binary_targets(labels: &[GrowthPattern], class: GrowthPattern) -> Vec<f64> {
    labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect()
}

fn check_training(x: &[Vec<f64>], labels: &[GrowthPattern]) -> Result<usize> {
    if x.len() != labels.len() {
        return Err(Error::invalid(format!("{} rows but {} labels", x.len(), labels.len())));
    }
    let first = labels.first().ok_or_else(|| Error::invalid("empty training set"))?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::invalid(format!("training set holds only class {first}")));
    }
    let dim = x[0].len();
    check_rows(x, dim)?;
    Ok(dim)
}

impl LinearSvmModel {
    /// Trains all six one-vs-rest problems on standardized features.
    pub fn fit(x: &[Vec<f64>], labels: &[GrowthPattern], hyper: &SvmHyperparams) -> Result<Self> {
        Ok(Self::fit_traced(x, labels, hyper, false)?.0)
    }

    /// As [`fit`](Self::fit), also returning each class's per-epoch objective.
    pub fn fit_traced(
        x: &[Vec<f64>],
        labels: &[GrowthPattern],
        hyper: &SvmHyperparams,
        trace: bool,
    ) -> Result<(Self, Vec<Vec<f64>>)> {
        check_training(x, labels)?;
        let fits: Vec<BinaryFit> = GrowthPattern::ALL
            .par_iter()
            .map(|&c| fit_binary(x, &binary_targets(labels, c), hyper, c.index() as u64, trace))
            .collect();
        let traces = fits.iter().map(|f| f.objective_trace.clone()).collect();
        let model = LinearSvmModel {
            weights: fits.iter().map(|f| f.weights.clone()).collect(),
            biases: fits.iter().map(|f| f.bias).collect(),
            hyper: *hyper,
        };
        Ok((model, traces))
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn score(&self, x: &[f64]) -> Result<ScoreVector> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "expected {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature"));
        }
        let mut s = [0.0; GrowthPattern::COUNT];
        for (c, out) in s.iter_mut().enumerate() {
            *out = dot(&self.weights[c], x) + self.biases[c];
        }
        Ok(ScoreVector(s))
    }

    pub fn predict(&self, x: &[f64]) -> Result<GrowthPattern> {
        Ok(self.score(x)?.argmax())
    }
}

/// A standardizer and the model trained behind it; scores raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmClassifier {
    pub standardizer: Standardizer,
    pub model: LinearSvmModel,
}

const MAGIC: &str = "cellmap-linear-svm v1";

impl SvmClassifier {
    /// Fits the standardizer on `raw`, then the model on standardized rows.
    pub fn train(raw: &[Vec<f64>], labels: &[GrowthPattern], hyper: &SvmHyperparams) -> Result<Self> {
        let standardizer = Standardizer::fit(raw)?;
        let x = standardizer.transform_all(raw);
        let model = LinearSvmModel::fit(&x, labels, hyper)?;
        Ok(SvmClassifier { standardizer, model })
    }

    pub fn score(&self, raw: &[f64]) -> Result<ScoreVector> {
        if raw.len() != self.standardizer.dim() {
            return Err(Error::invalid(format!(
                "expected {} features, got {}",
                self.standardizer.dim(),
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature"));
        }
        self.model.score(&self.standardizer.transform(raw))
    }

    pub fn predict(&self, raw: &[f64]) -> Result<GrowthPattern> {
        Ok(self.score(raw)?.argmax())
    }

    /// Line-oriented text; floats use Rust's shortest round-trip form.
    pub fn to_text(&self) -> String {
        let h = &self.model.hyper;
        let mut s = String::new();
        let row = |vals: &[f64]| vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "classes {}", GrowthPattern::ALL.map(|g| g.name()).join(" "));
        let _ = writeln!(s, "dim {}", self.model.dim());
        let _ = writeln!(s, "epochs {}", h.epochs);
        let _ = writeln!(s, "eta0 {:?}", h.eta0);
        let _ = writeln!(s, "lambda {:?}", h.lambda);
        let _ = writeln!(s, "seed {}", h.seed);
        let _ = writeln!(s, "mean {}", row(&self.standardizer.mean));
        let _ = writeln!(s, "std {}", row(&self.standardizer.std));
        for (c, g) in GrowthPattern::ALL.iter().enumerate() {
            let _ = writeln!(
                s,
                "class {} {:?} {}",
                g.name(),
                self.model.biases[c],
                row(&self.model.weights[c])
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::invalid(format!("model text: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{name}`")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(format!("expected `{name}`, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let floats = |v: &[String]| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}"))))
                .collect()
        };
        let one = |v: Vec<String>, name: &str| -> Result<String> {
            match <[String; 1]>::try_from(v) {
                Ok([s]) => Ok(s),
                Err(_) => Err(bad(format!("`{name}` takes one value"))),
            }
        };

        let classes = field("classes")?;
        if classes != GrowthPattern::ALL.map(|g| g.name().to_string()) {
            return Err(bad(format!("class order {classes:?} does not match")));
        }
        let dim: usize = one(field("dim")?, "dim")?
            .parse()
            .map_err(|e| bad(format!("dim: {e}")))?;
        let epochs = one(field("epochs")?, "epochs")?
            .parse()
            .map_err(|e| bad(format!("epochs: {e}")))?;
        let eta0 = one(field("eta0")?, "eta0")?
            .parse()
            .map_err(|e| bad(format!("eta0: {e}")))?;
        let lambda = one(field("lambda")?, "lambda")?
            .parse()
            .map_err(|e| bad(format!("lambda: {e}")))?;
        let seed = one(field("seed")?, "seed")?
            .parse()
            .map_err(|e| bad(format!("seed: {e}")))?;
        let mean = floats(&field("mean")?)?;
        let std = floats(&field("std")?)?;
        if mean.len() != dim || std.len() != dim {
            return Err(bad("standardizer width does not match dim".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for g in GrowthPattern::ALL {
            let parts = field("class")?;
            if parts.first().map(String::as_str) != Some(g.name()) {
                return Err(bad(format!("expected weights for {g}")));
            }
            let vals = floats(&parts[1..])?;
            if vals.len() != dim + 1 {
                return Err(bad(format!("class {g}: expected {} values", dim + 1)));
            }
            biases.push(vals[0]);
            weights.push(vals[1..].to_vec());
        }
        Ok(SvmClassifier {
            standardizer: Standardizer { mean, std },
            model: LinearSvmModel {
                weights,
                biases,
                hyper: SvmHyperparams {
                    epochs,
                    eta0,
                    lambda,
                    seed,
                },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
