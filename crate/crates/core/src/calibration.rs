//! Feature-distribution analysis: intra-class distance, the scaling-family
//! oracles, PCA projections and histograms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_columns;
use crate::error::{Error, Result};
use crate::peft::{measure_scaling_factors, prompted_softmax, EmbeddedPrompt, EmbeddingWay};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Slack allowed on the oracle inequalities.
pub const SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledFeatures {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Analysis(format!(
                "{} feature vectors but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if let Some((i, f)) = features.iter().enumerate().find(|(_, f)| f.len() != d) {
                return Err(Error::Analysis(format!("sample {i} has dimension {}, expected {d}", f.len())));
            }
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Analysis(format!("sample {i} has label {l} outside {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn members(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == k).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean_of(rows: &[&Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Accumulates `Σ (x - c)(x - c)ᵀ` into `acc`.
fn add_outer(acc: &mut Tensor, x: &[f64], c: &[f64]) {
    let d = x.len();
    for i in 0..d {
        let di = x[i] - c[i];
        for j in 0..d {
            let v = acc.get(i, j) + di * (x[j] - c[j]);
            acc.set(i, j, v);
        }
    }
}

fn trace(m: &Tensor) -> f64 {
    (0..m.rows()).map(|i| m.get(i, i)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpread {
    pub count: usize,
    pub center: Vec<f64>,
    /// `(1/n_k) Σ_i (x_i - x̄_k)(x_i - x̄_k)ᵀ`, row-major `d × d`.
    #[serde(skip)]
    pub sigma: Tensor,
    pub trace: f64,
    pub center_norm: f64,
    pub deviation_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraClassReport {
    /// `(1/N) Σ_k Σ_i (x_{k,i} - x̄_k)(x_{k,i} - x̄_k)ᵀ`.
    #[serde(skip)]
    pub sigma: Tensor,
    pub trace: f64,
    pub per_class: Vec<ClassSpread>,
}

pub fn intra_class_distance(f: &LabeledFeatures) -> Result<IntraClassReport> {
    let d = f.dim();
    let mut global = Tensor::zeros(&[d, d]);
    let mut per_class = Vec::with_capacity(f.num_classes);
    for k in 0..f.num_classes {
        let idx = f.members(k);
        if idx.is_empty() {
            return Err(Error::Analysis(format!("class {k} has no samples")));
        }
        let rows: Vec<&Vec<f64>> = idx.iter().map(|&i| &f.features[i]).collect();
        let center = mean_of(&rows, d);
        let mut sigma = Tensor::zeros(&[d, d]);
        let mut deviation_norms = Vec::with_capacity(rows.len());
        for r in &rows {
            add_outer(&mut sigma, r, &center);
            add_outer(&mut global, r, &center);
            let dev: Vec<f64> = r.iter().zip(&center).map(|(a, b)| a - b).collect();
            deviation_norms.push(norm(&dev));
        }
        let sigma = sigma.scale(1.0 / rows.len() as f64);
        per_class.push(ClassSpread {
            count: rows.len(),
            trace: trace(&sigma),
            center_norm: norm(&center),
            center,
            sigma,
            deviation_norms,
        });
    }
    let global = global.scale(1.0 / f.len() as f64);
    Ok(IntraClassReport {
        trace: trace(&global),
        sigma: global,
        per_class,
    })
}

/// Per-sample factors `c_{k,i}` aligned with the feature list, and one center
/// factor `c_k` per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFamily {
    pub sample_factors: Vec<f64>,
    pub class_factors: Vec<f64>,
}

impl ScalingFamily {
    /// Factors `c(‖x‖)` for samples and `c(‖x̄_k‖)` for centers.
    pub fn from_norm_map(f: &LabeledFeatures, c: impl Fn(f64) -> f64) -> Result<Self> {
        let report = intra_class_distance(f)?;
        Ok(Self {
            sample_factors: f.features.iter().map(|x| c(norm(x))).collect(),
            class_factors: report.per_class.iter().map(|s| c(s.center_norm)).collect(),
        })
    }

    pub fn uniform(f: &LabeledFeatures, c: f64) -> Self {
        Self {
            sample_factors: vec![c; f.len()],
            class_factors: vec![c; f.num_classes],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// Smallest `c_k‖x_i - x̄_k‖ - ‖c_i x_i - c_k x̄_k‖` over all samples.
    pub per_sample_margin: f64,
    pub per_sample_worst: (usize, usize),
    pub per_sample_holds: bool,
    /// Smallest `c_k² tr(Σ_W) - tr(Σ'_W)` over classes, `Σ'_W` about `c_k x̄_k`.
    pub trace_margin: f64,
    pub trace_worst_class: usize,
    pub trace_holds: bool,
    /// Same margin with `Σ'_W` taken about the mean of the scaled samples.
    pub empirical_mean_trace_margin: f64,
}

impl Lemma1Report {
    pub fn holds(&self) -> bool {
        self.per_sample_holds && self.trace_holds
    }
}

fn check_hypotheses(f: &LabeledFeatures, s: &ScalingFamily) -> Result<()> {
    if s.sample_factors.len() != f.len() || s.class_factors.len() != f.num_classes {
        return Err(Error::Precondition(format!(
            "scaling family has {} sample and {} class factors for {} samples and {} classes",
            s.sample_factors.len(),
            s.class_factors.len(),
            f.len(),
            f.num_classes
        )));
    }
    for (i, x) in f.features.iter().enumerate() {
        if let Some(v) = x.iter().find(|&&v| v < 0.0) {
            return Err(Error::Precondition(format!("sample {i} has negative entry {v}")));
        }
    }
    for (i, &c) in s.sample_factors.iter().chain(&s.class_factors).enumerate() {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Precondition(format!("factor {i} = {c} outside [0, 1]")));
        }
    }
    let norms: Vec<f64> = f.features.iter().map(|x| norm(x)).collect();
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            if f.labels[i] != f.labels[j] {
                continue;
            }
            let (ci, cj) = (s.sample_factors[i], s.sample_factors[j]);
            let dn = norms[i] - norms[j];
            if (ci - cj) * dn > SLACK {
                return Err(Error::Precondition(format!(
                    "samples ({i}, {j}) break anti-monotonicity: c = ({ci}, {cj}), norms = ({}, {})",
                    norms[i], norms[j]
                )));
            }
            if (ci * norms[i] - cj * norms[j]) * dn < -SLACK {
                return Err(Error::Precondition(format!(
                    "samples ({i}, {j}) break order preservation: c = ({ci}, {cj}), norms = ({}, {})",
                    norms[i], norms[j]
                )));
            }
        }
    }
    Ok(())
}

/// Checks the per-sample norm bound and the trace bound of the scaled
/// intra-class distance against `c_k²` times the original.
pub fn check_lemma1(f: &LabeledFeatures, s: &ScalingFamily) -> Result<Lemma1Report> {
    check_hypotheses(f, s)?;
    let report = intra_class_distance(f)?;
    let mut out = Lemma1Report {
        per_sample_margin: f64::INFINITY,
        per_sample_worst: (0, 0),
        per_sample_holds: true,
        trace_margin: f64::INFINITY,
        trace_worst_class: 0,
        trace_holds: true,
        empirical_mean_trace_margin: f64::INFINITY,
    };
    for (k, spread) in report.per_class.iter().enumerate() {
        let ck = s.class_factors[k];
        let idx = f.members(k);
        let scaled_center: Vec<f64> = spread.center.iter().map(|v| ck * v).collect();
        let scaled: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| f.features[i].iter().map(|v| s.sample_factors[i] * v).collect())
            .collect();
        let mut sq_about_center = 0.0;
        for (pos, (&i, y)) in idx.iter().zip(&scaled).enumerate() {
            let dev: Vec<f64> = y.iter().zip(&scaled_center).map(|(a, b)| a - b).collect();
            let lhs = norm(&dev);
            sq_about_center += lhs * lhs;
            let margin = ck * spread.deviation_norms[pos] - lhs;
            if margin < out.per_sample_margin {
                out.per_sample_margin = margin;
                out.per_sample_worst = (k, i);
            }
        }
        let n = idx.len() as f64;
        let bound = ck * ck * spread.trace;
        let margin = bound - sq_about_center / n;
        if margin < out.trace_margin {
            out.trace_margin = margin;
            out.trace_worst_class = k;
        }
        let refs: Vec<&Vec<f64>> = scaled.iter().collect();
        let emp = mean_of(&refs, f.dim());
        let emp_sq: f64 = scaled
            .iter()
            .map(|y| y.iter().zip(&emp).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        out.empirical_mean_trace_margin = out.empirical_mean_trace_margin.min(bound - emp_sq / n);
    }
    out.per_sample_holds = out.per_sample_margin >= -SLACK;
    out.trace_holds = out.trace_margin >= -SLACK;
    Ok(out)
}

/// Summary of randomized Lemma 1 trials over non-negative Gaussian features
/// with factors `c(t) = 1 / (1 + t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Trials {
    pub trials: usize,
    pub per_sample_failures: usize,
    pub trace_failures: usize,
    pub worst_per_sample_margin: f64,
    pub worst_trace_margin: f64,
    /// Seed-indexed trial of the first per-sample failure.
    pub first_per_sample_failure: Option<usize>,
}

impl Lemma1Trials {
    pub fn per_sample_holds(&self) -> bool {
        self.per_sample_failures == 0
    }

    pub fn trace_holds(&self) -> bool {
        self.trace_failures == 0
    }
}

pub fn lemma1_trial(seed: u64, trial: usize) -> Result<(LabeledFeatures, ScalingFamily)> {
    let mut rng = stream(seed, &format!("lemma1/{trial}"));
    let d = rng.gen_range(1..=8);
    let k = rng.gen_range(1..=3);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for class in 0..k {
        for _ in 0..rng.gen_range(2..=12) {
            let x: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal).abs())
                .collect();
            features.push(x);
            labels.push(class);
        }
    }
    let f = LabeledFeatures::new(features, labels, k)?;
    let s = ScalingFamily::from_norm_map(&f, |t| 1.0 / (1.0 + t))?;
    Ok((f, s))
}

pub fn lemma1_randomized(seed: u64, trials: usize) -> Result<Lemma1Trials> {
    let mut out = Lemma1Trials {
        trials,
        per_sample_failures: 0,
        trace_failures: 0,
        worst_per_sample_margin: f64::INFINITY,
        worst_trace_margin: f64::INFINITY,
        first_per_sample_failure: None,
    };
    for t in 0..trials {
        let (f, s) = lemma1_trial(seed, t)?;
        let r = check_lemma1(&f, &s)?;
        if !r.per_sample_holds {
            out.per_sample_failures += 1;
            out.first_per_sample_failure.get_or_insert(t);
        }
        if !r.trace_holds {
            out.trace_failures += 1;
        }
        out.worst_per_sample_margin = out.worst_per_sample_margin.min(r.per_sample_margin);
        out.worst_trace_margin = out.worst_trace_margin.min(r.trace_margin);
    }
    Ok(out)
}

/// `c(z) = (1 + e^z) / (1 + e^z + e^{z p})`, the retained mass of the column
/// `[0, z]` under the prompt `z p`.
pub fn prop1_factor(z: f64, p: f64) -> f64 {
    // Divide through by the largest exponent to stay finite for large |z|.
    let m = 0f64.max(z).max(z * p);
    let kept = (-m).exp() + (z - m).exp();
    kept / (kept + (z * p - m).exp())
}

/// The same factor measured from the prompted softmax as a norm ratio.
pub fn prop1_ratio(z: f64, p: f64) -> Result<f64> {
    let u = Tensor::column(&[0.0, z]);
    let prompt = EmbeddedPrompt::new(Tensor::scalar(z * p), EmbeddingWay::PureCat);
    let prompted = prompted_softmax(&u, &prompt)?;
    let plain = softmax_columns(&u)?;
    Ok(prompted.data().iter().map(|v| v * v).sum::<f64>().sqrt() / plain.data().iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Check {
    pub c1: f64,
    pub c2: f64,
    /// Larger logit gets the smaller (or equal) factor.
    pub holds: bool,
    /// Largest gap between closed form and measured ratio at `z1` and `z2`.
    pub ratio_deviation: f64,
}

pub fn check_prop1(z1: f64, z2: f64, p: f64) -> Result<Prop1Check> {
    let (c1, c2) = (prop1_factor(z1, p), prop1_factor(z2, p));
    let holds = if z2 >= z1 { c1 >= c2 } else { c2 >= c1 };
    let ratio_deviation = (prop1_ratio(z1, p)? - c1).abs().max((prop1_ratio(z2, p)? - c2).abs());
    Ok(Prop1Check {
        c1,
        c2,
        holds,
        ratio_deviation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Sweep {
    pub grid_points: usize,
    pub strictly_decreasing: bool,
    /// Smallest `c(z_i) - c(z_{i+1})` along the grid.
    pub min_decrease: f64,
    pub random_points: usize,
    pub max_ratio_deviation: f64,
}

/// Grid `z = -5, -4.9, ..., 5` for monotonicity, plus random `z ∈ [-5, 5]`
/// against the measured norm ratio.
pub fn prop1_sweep(p: f64, seed: u64, random_points: usize) -> Result<Prop1Sweep> {
    let grid: Vec<f64> = (0..=100).map(|i| -5.0 + f64::from(i) / 10.0).collect();
    let cs: Vec<f64> = grid.iter().map(|&z| prop1_factor(z, p)).collect();
    let min_decrease = cs.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
    let mut rng = stream(seed, "prop1");
    let mut max_dev: f64 = 0.0;
    for _ in 0..random_points {
        let z = rng.gen_range(-5.0..=5.0);
        max_dev = max_dev.max((prop1_ratio(z, p)? - prop1_factor(z, p)).abs());
    }
    Ok(Prop1Sweep {
        grid_points: grid.len(),
        strictly_decreasing: min_decrease > 0.0,
        min_decrease,
        random_points,
        max_ratio_deviation: max_dev,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSweep {
    pub instances: usize,
    /// Largest `|prompted - c · plain|` entry.
    pub max_proportional_deviation: f64,
    /// Largest gap between `c` and the retained ℓ₁ mass.
    pub max_l1_gap: f64,
    /// Largest gap between `c` and the ℓ₂ norm ratio.
    pub max_l2_gap: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl ScalingSweep {
    pub fn factors_inside_unit_interval(&self) -> bool {
        self.min_factor > 0.0 && self.max_factor < 1.0
    }
}

fn random_prompt_instance(rng: &mut impl Rng, prompt_scale: Option<f64>) -> Result<(Tensor, EmbeddedPrompt)> {
    let n = rng.gen_range(2..=12);
    let d_p = rng.gen_range(1..=6);
    let ktq = Tensor::uniform(&[n, n], -3.0, 3.0, rng);
    let values = match prompt_scale {
        Some(v) => Tensor::full(&[d_p, n], v),
        None => Tensor::uniform(&[d_p, n], -3.0, 3.0, rng),
    };
    let way = if rng.gen_bool(0.5) { EmbeddingWay::PureCat } else { EmbeddingWay::MultiCat };
    Ok((ktq, EmbeddedPrompt::new(values, way)))
}

/// Random `(KᵀQ, P_E)` pairs under both concatenating ways: each prompted
/// column against `c_j` times the plain column.
pub fn scaling_sweep(seed: u64, instances: usize) -> Result<ScalingSweep> {
    scaling_sweep_with(seed, instances, prompted_softmax)
}

/// [`scaling_sweep`] against an arbitrary prompted-softmax kernel. The
/// factors `c_j` still come from the reference computation.
pub fn scaling_sweep_with<K>(seed: u64, instances: usize, kernel: K) -> Result<ScalingSweep>
where
    K: Fn(&Tensor, &EmbeddedPrompt) -> Result<Tensor>,
{
    let mut rng = stream(seed, "scaling-sweep");
    let mut out = ScalingSweep {
        instances,
        max_proportional_deviation: 0.0,
        max_l1_gap: 0.0,
        max_l2_gap: 0.0,
        min_factor: f64::INFINITY,
        max_factor: f64::NEG_INFINITY,
    };
    for _ in 0..instances {
        let (ktq, prompt) = random_prompt_instance(&mut rng, None)?;
        let prompted = kernel(&ktq, &prompt)?;
        let plain = softmax_columns(&ktq)?;
        let c = measure_scaling_factors(&ktq, &prompt)?;
        for (j, &cj) in c.iter().enumerate() {
            let p = prompted.col(j);
            let q = plain.col(j);
            for (a, b) in p.iter().zip(&q) {
                out.max_proportional_deviation = worst_of(out.max_proportional_deviation, (a - cj * b).abs());
            }
            let l1: f64 = p.iter().sum();
            out.max_l1_gap = worst_of(out.max_l1_gap, (l1 - cj).abs());
            out.max_l2_gap = worst_of(out.max_l2_gap, (norm(&p) / norm(&q) - cj).abs());
            out.min_factor = out.min_factor.min(cj);
            out.max_factor = out.max_factor.max(cj);
        }
    }
    Ok(out)
}

/// Running maximum of a gap where NaN counts as infinitely bad.
fn worst_of(acc: f64, gap: f64) -> f64 {
    if gap.is_nan() {
        f64::INFINITY
    } else {
        acc.max(gap)
    }
}

/// Largest `‖prompted - plain‖∞` with every prompt entry at `prompt_value`.
pub fn limit_sweep(seed: u64, instances: usize, prompt_value: f64) -> Result<f64> {
    let mut rng = stream(seed, "limit-sweep");
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (ktq, prompt) = random_prompt_instance(&mut rng, Some(prompt_value))?;
        let prompted = prompted_softmax(&ktq, &prompt)?;
        worst = worst.max(prompted.max_abs_diff(&softmax_columns(&ktq)?));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Unit eigenvectors, largest eigenvalue first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue over total variance; zero when the data has no variance.
    pub explained_variance_ratio: Vec<f64>,
    /// Per sample, one coordinate per component.
    pub projections: Vec<Vec<f64>>,
    pub converged: bool,
}

pub const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 200_000;

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| m.get(i, j) * v[j]).sum()).collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
    }
}

/// Mean-centred projection onto the top `k` principal directions, found by
/// power iteration with deflation from a seeded start vector.
pub fn pca_project(f: &LabeledFeatures, k: usize, seed: u64) -> Result<PcaResult> {
    if !(1..=2).contains(&k) {
        return Err(Error::Analysis(format!("pca supports 1 or 2 components, got {k}")));
    }
    let m = f.len();
    if m < k + 1 {
        return Err(Error::Analysis(format!("pca with {k} components needs {} samples, got {m}", k + 1)));
    }
    let d = f.dim();
    if d < k {
        return Err(Error::Analysis(format!("cannot take {k} components of {d}-dimensional features")));
    }
    let rows: Vec<&Vec<f64>> = f.features.iter().collect();
    let mean = mean_of(&rows, d);
    let mut cov = Tensor::zeros(&[d, d]);
    for r in &rows {
        add_outer(&mut cov, r, &mean);
    }
    let cov = cov.scale(1.0 / (m - 1) as f64);
    let total = trace(&cov);

    let mut rng = stream(seed, "pca");
    let mut deflated = cov.clone();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut converged = true;
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &components);
        let n0 = norm(&v);
        v.iter_mut().for_each(|x| *x /= n0);
        let mut lambda = 0.0;
        let mut done = false;
        for _ in 0..PCA_MAX_ITERS {
            let mut w = matvec(&deflated, &v);
            orthogonalize(&mut w, &components);
            let nw = norm(&w);
            if nw <= f64::MIN_POSITIVE {
                // No variance left outside the earlier components.
                lambda = 0.0;
                done = true;
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let delta = norm(&w.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
            v = w;
            lambda = nw;
            if delta < PCA_TOL {
                done = true;
                break;
            }
        }
        converged &= done;
        let lead = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                let val = deflated.get(i, j) - lambda * v[i] * v[j];
                deflated.set(i, j, val);
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let projections = rows
        .iter()
        .map(|r| {
            components
                .iter()
                .map(|c| r.iter().zip(&mean).zip(c).map(|((x, mu), ci)| (x - mu) * ci).sum())
                .collect()
        })
        .collect();
    let explained_variance_ratio = eigenvalues
        .iter()
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    Ok(PcaResult {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio,
        projections,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges; a single degenerate bin when all values agree.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn feature_histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Analysis("histogram of no values".into()));
    }
    if bins == 0 {
        return Err(Error::Analysis("histogram needs at least one bin".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Analysis(format!("histogram of non-finite value {v}")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Histogram {
            edges: vec![lo, hi],
            counts: vec![values.len()],
        });
    }
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    edges[bins] = hi;
    let mut counts = vec![0; bins];
    for &v in values {
        // Number of inner edges at or below v.
        let b = edges[1..bins].partition_point(|&e| e <= v);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// `sample_id,label,pc1[,pc2]` rows.
pub fn projections_csv(ids: &[String], labels: &[usize], pca: &PcaResult) -> String {
    let k = pca.components.len();
    let mut s = String::from("sample_id,label,pc1");
    if k == 2 {
        s.push_str(",pc2");
    }
    s.push('\n');
    for ((id, l), p) in ids.iter().zip(labels).zip(&pca.projections) {
        s.push_str(&format!("{id},{l}"));
        for v in p {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}
