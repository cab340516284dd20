//! Reference implementations of the training objectives: a contrastive
//! reconstruction loss, an orthogonality regularizer with a margin, token
//! cross-entropy, and their weighted combination.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// The target token has probability zero.
    #[error("infinite loss: zero probability at target of position {position}")]
    InfiniteLoss { position: usize },
}

fn invalid(msg: impl Into<String>) -> ObjectiveError {
    ObjectiveError::InvalidArgument(msg.into())
}

/// `B` sequences of `K` embeddings of dimension `d`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    b: usize,
    k: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(b: usize, k: usize, d: usize, data: Vec<f64>) -> Result<Self, ObjectiveError> {
        if d == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if data.len() != b * k * d {
            return Err(invalid(format!(
                "expected {} values for shape ({b}, {k}, {d}), got {}",
                b * k * d,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("embeddings must be finite"));
        }
        Ok(Self { b, k, d, data })
    }

    /// A single sequence holding `rows`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ObjectiveError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("rows differ in dimension"));
        }
        Self::new(1, rows.len(), d, rows.concat())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.b, self.k, self.d)
    }

    /// Number of embeddings, `B * K`.
    pub fn len(&self) -> usize {
        self.b * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| x * factor).collect(),
            ..self.clone()
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Which `j` enter the numerator sum of the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Numerator {
    /// Every `j`, including `i`.
    All,
    ExcludeSelf,
    /// Only `j = i`, the matching anchor.
    PositiveOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    pub numerator: Numerator,
    pub negate: bool,
}

impl ContrastiveOptions {
    /// The formula as written: all `j`, no sign flip.
    pub fn literal(temperature: f64) -> Self {
        Self {
            temperature,
            numerator: Numerator::All,
            negate: false,
        }
    }

    /// InfoNCE-style: positive pair only, negated so that lower is better.
    pub fn conventional(temperature: f64) -> Self {
        Self {
            temperature,
            numerator: Numerator::PositiveOnly,
            negate: true,
        }
    }
}

/// Mean over `i` of `sum_j log(exp(s_ij / t) / sum_{k != i} exp(s_ik / t))`,
/// where `s_ij` is the cosine between reconstructed embedding `i` and anchor
/// `j`, both indexed over the flattened batch.
pub fn contrastive_loss(
    reconstructed: &EmbeddingBatch,
    anchors: &EmbeddingBatch,
    opts: &ContrastiveOptions,
) -> Result<f64, ObjectiveError> {
    if reconstructed.shape() != anchors.shape() {
        return Err(invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            reconstructed.shape(),
            anchors.shape()
        )));
    }
    if !(opts.temperature > 0.0 && opts.temperature.is_finite()) {
        return Err(invalid("temperature must be positive"));
    }
    let n = reconstructed.len();
    if n < 2 {
        return Err(invalid("contrastive loss needs at least two embeddings"));
    }
    let t = opts.temperature;
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| cosine(reconstructed.row(i), anchors.row(j)).map(|s| s / t))
            .collect::<Result<_, _>>()?;
        // log-sum-exp over k != i, shifted for stability
        let max = logits
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + logits
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .map(|(_, l)| (l - max).exp())
                .sum::<f64>()
                .ln();
        let per_i: f64 = match opts.numerator {
            Numerator::All => logits.iter().map(|l| l - lse).sum(),
            Numerator::ExcludeSelf => logits
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, l)| l - lse)
                .sum(),
            Numerator::PositiveOnly => logits[i] - lse,
        };
        total += per_i;
    }
    let mean = total / n as f64;
    Ok(if opts.negate { -mean } else { mean })
}

/// `2 * sum_{i<j} max(cos(e_i, e_j) - h, 0) / (N (N - 1))` over the
/// flattened batch.
pub fn ortho_loss(embeddings: &EmbeddingBatch, margin: f64) -> Result<f64, ObjectiveError> {
    if !(0.0..=1.0).contains(&margin) {
        return Err(invalid("margin must lie in [0, 1]"));
    }
    let n = embeddings.len();
    if n < 2 {
        return Err(invalid("orthogonality loss needs at least two embeddings"));
    }
    let units: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = embeddings.row(i);
            let l = norm(r);
            if l == 0.0 {
                Err(invalid(format!("embedding {i} has zero norm")))
            } else {
                Ok(r.iter().map(|x| x / l).collect())
            }
        })
        .collect::<Result<_, _>>()?;
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
            sum += (c.clamp(-1.0, 1.0) - margin).max(0.0);
        }
    }
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

/// `-sum_k sum_v t_kv ln p_kv` over positions `k`.
pub fn ce_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    const ROW_TOL: f64 = 1e-6;
    if predictions.len() != targets.len() {
        return Err(invalid(format!(
            "{} prediction rows but {} target rows",
            predictions.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    for (k, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.len() != t.len() {
            return Err(invalid(format!("position {k}: vocabulary sizes differ")));
        }
        for (name, row) in [("prediction", p), ("target", t)] {
            if row.iter().any(|x| !(0.0..=1.0).contains(x)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                return Err(invalid(format!("position {k}: {name} row is not a distribution")));
            }
        }
        for (pv, tv) in p.iter().zip(t) {
            if *tv == 0.0 {
                continue;
            }
            if *pv == 0.0 {
                return Err(ObjectiveError::InfiniteLoss { position: k });
            }
            loss -= tv * pv.ln();
        }
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            margin: 0.1,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(invalid("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(invalid("margin must lie in [0, 1)"));
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// `alpha * ce + beta * ortho + gamma / N * sum(contrast)`.
pub fn total_loss(ce: f64, ortho: f64, contrast: &[f64], cfg: &LossConfig) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    if contrast.is_empty() {
        return Err(invalid("at least one contrastive term is required"));
    }
    let c: f64 = contrast.iter().sum();
    Ok(cfg.alpha * ce + cfg.beta * ortho + cfg.gamma / contrast.len() as f64 * c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoldenCase {
    pub name: String,
    pub inputs: serde_json::Value,
    pub value: f64,
    /// Closed-form value the implementation must reproduce.
    pub expected: f64,
}

/// Closed-form checks for cross-implementation comparison.
pub fn golden_cases() -> Result<Vec<GoldenCase>, ObjectiveError> {
    use serde_json::json;
    let mut out = Vec::new();

    let s: f64 = 0.6;
    let pair = EmbeddingBatch::from_rows(&[vec![1.0, 0.0], vec![s, (1.0 - s * s).sqrt()]])?;
    for tau in [1.0, 0.5, 0.07] {
        out.push(GoldenCase {
            name: format!("contrastive_literal_size2_tau{tau}"),
            inputs: json!({"embeddings": [[1.0, 0.0], [s, (1.0 - s * s).sqrt()]], "temperature": tau}),
            value: contrastive_loss(&pair, &pair, &ContrastiveOptions::literal(tau))?,
            expected: (1.0 - s) / tau,
        });
    }
    for n in [2usize, 4, 8] {
        let same = EmbeddingBatch::from_rows(&vec![vec![0.3, -1.2, 2.0]; n])?;
        out.push(GoldenCase {
            name: format!("contrastive_literal_identical_n{n}"),
            inputs: json!({"n": n, "embedding": [0.3, -1.2, 2.0], "temperature": 1.0}),
            value: contrastive_loss(&same, &same, &ContrastiveOptions::literal(1.0))?,
            expected: n as f64 * (1.0 / (n as f64 - 1.0)).ln(),
        });
    }
    for h in [0.0, 0.1, 0.5] {
        let same = EmbeddingBatch::from_rows(&vec![vec![1.0, 2.0]; 5])?;
        out.push(GoldenCase {
            name: format!("ortho_identical_h{h}"),
            inputs: json!({"n": 5, "embedding": [1.0, 2.0], "margin": h}),
            value: ortho_loss(&same, h)?,
            expected: 1.0 - h,
        });
    }
    let basis = EmbeddingBatch::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])?;
    out.push(GoldenCase {
        name: "ortho_orthogonal".into(),
        inputs: json!({"embeddings": "identity(3)", "margin": 0.1}),
        value: ortho_loss(&basis, 0.1)?,
        expected: 0.0,
    });
    for (v, n) in [(4usize, 3usize), (10, 5)] {
        let p = vec![vec![1.0 / v as f64; v]; n];
        let t: Vec<Vec<f64>> = (0..n)
            .map(|k| (0..v).map(|j| if j == k % v { 1.0 } else { 0.0 }).collect())
            .collect();
        out.push(GoldenCase {
            name: format!("ce_uniform_v{v}_n{n}"),
            inputs: json!({"vocabulary": v, "positions": n}),
            value: ce_loss(&p, &t)?,
            expected: n as f64 * (v as f64).ln(),
        });
    }
    let cfg = LossConfig::default();
    out.push(GoldenCase {
        name: "total_defaults".into(),
        inputs: json!({"ce": 0.0, "ortho": 1.0, "contrast": [2.0, 4.0]}),
        value: total_loss(0.0, 1.0, &[2.0, 4.0], &cfg)?,
        expected: 0.4,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9
    }

    #[test]
    fn golden_cases_match_closed_forms() {
        for c in golden_cases().unwrap() {
            assert!(close(c.value, c.expected), "{}: {} vs {}", c.name, c.value, c.expected);
        }
    }

    #[test]
    fn contrastive_modes_at_size_two() {
        let s: f64 = -0.3;
        let e = EmbeddingBatch::from_rows(&[vec![1.0, 0.0], vec![s, (1.0 - s * s).sqrt()]]).unwrap();
        let t = 0.5;
        // Denominator for each i is exp(s / t) alone.
        let ex = ContrastiveOptions {
            numerator: Numerator::ExcludeSelf,
            ..ContrastiveOptions::literal(t)
        };
        assert!(close(contrastive_loss(&e, &e, &ex).unwrap(), 0.0));
        let conv = contrastive_loss(&e, &e, &ContrastiveOptions::conventional(t)).unwrap();
        assert!(close(conv, -(1.0 - s) / t));
    }

    #[test]
    fn contrastive_errors() {
        let one = EmbeddingBatch::from_rows(&[vec![1.0]]).unwrap();
        assert!(contrastive_loss(&one, &one, &ContrastiveOptions::literal(1.0)).is_err());
        let two = EmbeddingBatch::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(contrastive_loss(&two, &two, &ContrastiveOptions::literal(0.0)).is_err());
        let other = EmbeddingBatch::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        assert!(contrastive_loss(&two, &other, &ContrastiveOptions::literal(1.0)).is_err());
    }

    #[test]
    fn ortho_errors_and_saturation() {
        let z = EmbeddingBatch::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(ortho_loss(&z, 0.1).is_err());
        let e = EmbeddingBatch::from_rows(&[vec![1.0, 0.2], vec![0.9, 0.1], vec![-1.0, 3.0]]).unwrap();
        assert_eq!(ortho_loss(&e, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn ce_cases() {
        let onehot = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(ce_loss(&onehot, &onehot).unwrap(), 0.0);
        assert!(ce_loss(&onehot, &onehot[..1]).is_err());
        let p = vec![vec![1.0, 0.0]];
        let t = vec![vec![0.0, 1.0]];
        assert_eq!(ce_loss(&p, &t), Err(ObjectiveError::InfiniteLoss { position: 0 }));
        assert!(ce_loss(&[vec![0.5, 0.6]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 0.0, &[0.0], &cfg).unwrap(), 1.0);
        assert_eq!(total_loss(0.0, 0.0, &[0.0, 0.0], &cfg).unwrap(), 0.0);
        assert!(total_loss(0.0, 0.0, &[], &cfg).is_err());
    }

    fn batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..7, 1usize..5).prop_flat_map(|(n, d)| {
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
                .prop_filter("non-zero rows", |rows| rows.iter().all(|r| norm(r) > 1e-3))
        })
    }

    proptest! {
        #[test]
        fn scale_invariance(rows in batch(), factor in 0.01f64..100.0) {
            let e = EmbeddingBatch::from_rows(&rows).unwrap();
            let s = e.scaled(factor);
            let a = ortho_loss(&e, 0.1).unwrap();
            let b = ortho_loss(&s, 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let opts = ContrastiveOptions::literal(0.5);
            let a = contrastive_loss(&e, &e, &opts).unwrap();
            let b = contrastive_loss(&s, &s, &opts).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn ortho_non_increasing_in_margin(rows in batch(), h1 in 0.0f64..1.0, h2 in 0.0f64..1.0) {
            let e = EmbeddingBatch::from_rows(&rows).unwrap();
            let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            prop_assert!(ortho_loss(&e, hi).unwrap() <= ortho_loss(&e, lo).unwrap());
        }

        #[test]
        fn total_is_linear(ce in 0.0f64..10.0, ortho in 0.0f64..1.0, c in prop::collection::vec(-5.0f64..5.0, 1..6), k in 0.0f64..4.0) {
            let cfg = LossConfig::default();
            let base = total_loss(ce, ortho, &c, &cfg).unwrap();
            let bumped = total_loss(ce + k, ortho, &c, &cfg).unwrap();
            prop_assert!((bumped - base - cfg.alpha * k).abs() < 1e-9);
            let bumped = total_loss(ce, ortho + k, &c, &cfg).unwrap();
            prop_assert!((bumped - base - cfg.beta * k).abs() < 1e-9);
        }
    }
}
