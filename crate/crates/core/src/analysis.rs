//! Evaluation and diagnostics: accuracy with optional label masking,
//! descriptor-similarity correlation, the PAC-Bayes bound, exact objective
//! gradient norms and the per-round metrics table.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{Dataset, Population};
use crate::models::{compute_descriptor, descriptor_vjp, generate_personal_model, hypernetwork_vjp, Descriptor, ExampleBatch, ModelError};
use crate::nn::{argmax, backward_trace, cross_entropy_loss, forward, forward_trace, NetworkSpec, ParamVector, Scalar};
use crate::protocol::{ProtocolError, ServerState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("label mask is empty")]
    EmptyMask,
    #[error("mask class {class} is outside 0..{classes}")]
    MaskClass { class: usize, classes: usize },
    #[error("test set has no labels")]
    Unlabeled,
    #[error("{what}: length {actual}, expected {expected}")]
    Length { what: &'static str, expected: usize, actual: usize },
    #[error("need at least {needed} {what}, got {got}")]
    TooFew { what: &'static str, needed: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

const EVAL_CHUNK: usize = 256;

/// Per-example predictions of a client model; with a mask the argmax only
/// ranges over the listed classes.
pub fn predict_labels<T: Scalar>(
    theta: &ParamVector<T>,
    client_model: &NetworkSpec,
    data: &ExampleBatch<T>,
    mask: Option<&[usize]>,
) -> Result<Vec<usize>, AnalysisError> {
    let classes = client_model.output_dim();
    let allowed = match mask {
        None => None,
        Some([]) => return Err(AnalysisError::EmptyMask),
        Some(m) => {
            let mut keep = vec![false; classes];
            for &c in m {
                if c >= classes {
                    return Err(AnalysisError::MaskClass { class: c, classes });
                }
                keep[c] = true;
            }
            Some(keep)
        }
    };
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let scores = forward(client_model, theta, &data.select(chunk).images()?).map_err(ModelError::from)?;
        for i in 0..chunk.len() {
            let row = scores.row(i);
            out.push(match &allowed {
                None => argmax(row),
                Some(keep) => {
                    let mut best: Option<usize> = None;
                    for (c, &v) in row.iter().enumerate() {
                        if keep[c] && best.is_none_or(|b| v > row[b]) {
                            best = Some(c);
                        }
                    }
                    best.expect("mask is nonempty")
                }
            });
        }
    }
    Ok(out)
}

/// Fraction of correctly classified examples.
pub fn eval_accuracy<T: Scalar>(
    theta: &ParamVector<T>,
    client_model: &NetworkSpec,
    test: &ExampleBatch<T>,
    mask: Option<&[usize]>,
) -> Result<f64, AnalysisError> {
    if test.is_empty() {
        return Err(AnalysisError::EmptyTestSet);
    }
    let labels = test.labels().ok_or(AnalysisError::Unlabeled)?;
    let pred = predict_labels(theta, client_model, test, mask)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Pairwise Euclidean distances between descriptors.
pub fn descriptor_distance_matrix<T: Scalar>(descriptors: &[Descriptor<T>]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if descriptors.len() < 2 {
        return Err(AnalysisError::TooFew { what: "descriptors", needed: 2, got: descriptors.len() });
    }
    let l = descriptors[0].len();
    for d in descriptors {
        if d.len() != l {
            return Err(AnalysisError::Length { what: "descriptor", expected: l, actual: d.len() });
        }
    }
    Ok(distance_matrix(descriptors.len(), |i, j| descriptors[i].distance(&descriptors[j])))
}

fn distance_matrix(n: usize, dist: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(i, j);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Ranks starting at 1, with tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rank correlation: the Pearson correlation of the rank vectors.
/// `None` when either side has no rank variance.
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<Option<f64>, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Length { what: "rank vector", expected: a.len(), actual: b.len() });
    }
    if a.len() < 2 {
        return Err(AnalysisError::TooFew { what: "paired values", needed: 2, got: a.len() });
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// Mean over `targets` of the rank correlation between descriptor distances
/// and class-proportion distances to every other client.
pub fn descriptor_correlation<T: Scalar>(
    descriptors: &[Descriptor<T>],
    proportions: &[Vec<f64>],
    targets: &[usize],
) -> Result<f64, AnalysisError> {
    if proportions.len() != descriptors.len() {
        return Err(AnalysisError::Length { what: "proportion list", expected: descriptors.len(), actual: proportions.len() });
    }
    let dv = descriptor_distance_matrix(descriptors)?;
    let dpi = distance_matrix(proportions.len(), |i, j| {
        proportions[i].iter().zip(&proportions[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    });
    if dpi.iter().flatten().all(|&d| d == 0.0) {
        return Err(AnalysisError::Degenerate("all clients have identical class proportions".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for &i in targets {
        if i >= descriptors.len() {
            return Err(AnalysisError::Length { what: "target client index", expected: descriptors.len(), actual: i });
        }
        let others = |m: &Vec<Vec<f64>>| (0..m.len()).filter(|&j| j != i).map(|j| m[i][j]).collect::<Vec<_>>();
        if let Some(r) = spearman_rank_corr(&others(&dv), &others(&dpi))? {
            total += r;
            count += 1;
        }
    }
    if count == 0 {
        return Err(AnalysisError::Degenerate("no target client has distinguishable distances".into()));
    }
    Ok(total / count as f64)
}

/// Descriptors of every client in a population, from each client's full
/// training split.
pub fn population_descriptors<T: Scalar>(
    dataset: &Dataset,
    population: &Population,
    state: &ServerState<T>,
) -> Result<Vec<Descriptor<T>>, AnalysisError> {
    population
        .clients
        .iter()
        .map(|c| Ok(compute_descriptor(&dataset.batch::<T>(&c.train, true), &state.embed, &state.eta_v, state.embed_kind)?))
        .collect()
}

/// Descriptor-similarity analysis over the unseen clients of a population.
pub fn descriptor_correlation_run<T: Scalar>(
    dataset: &Dataset,
    population: &Population,
    state: &ServerState<T>,
) -> Result<f64, AnalysisError> {
    let descriptors = population_descriptors(dataset, population, state)?;
    let proportions: Vec<Vec<f64>> = population.clients.iter().map(|c| c.proportions.clone()).collect();
    let position = |id: u32| population.clients.iter().position(|c| c.client_id == id);
    let targets: Vec<usize> = population.unseen_ids.iter().filter_map(|&id| position(id)).collect();
    if targets.is_empty() {
        return Err(AnalysisError::TooFew { what: "unseen clients", needed: 1, got: 0 });
    }
    descriptor_correlation(&descriptors, &proportions, &targets)
}

/// Inputs of the PAC-Bayes generalisation bound for one realisation of the
/// personalised models.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub alpha_h: f64,
    pub alpha_v: f64,
    pub alpha_theta: f64,
    pub delta: f64,
    /// Number of clients.
    pub n: usize,
    /// Examples per client.
    pub m: usize,
    pub eta_h_sq: f64,
    pub eta_v_sq: f64,
    /// `‖θ_i‖²` for every client.
    pub theta_sq: Vec<f64>,
    /// Empirical 0–1 loss.
    pub empirical_loss: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::Parameter(m));
        for (name, a) in [("alpha_h", self.alpha_h), ("alpha_v", self.alpha_v), ("alpha_theta", self.alpha_theta)] {
            if !(a.is_finite() && a > 0.0) {
                return bad(format!("{name} must be positive, got {a}"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.n == 0 || self.m == 0 {
            return bad("n and m must be at least 1".into());
        }
        if self.theta_sq.len() != self.n {
            return bad(format!("{} model norms given for {} clients", self.theta_sq.len(), self.n));
        }
        for (name, v) in [("eta_h_sq", self.eta_h_sq), ("eta_v_sq", self.eta_v_sq)].into_iter().chain(self.theta_sq.iter().map(|&t| ("theta_sq", t))) {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.empirical_loss) {
            return bad(format!("empirical_loss must lie in [0, 1], got {}", self.empirical_loss));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundTerms {
    pub empirical: f64,
    /// Complexity of the shared networks, scaled by the number of clients.
    pub meta: f64,
    /// Complexity of the personalised models, scaled by all samples.
    pub client: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.empirical + self.meta + self.client
    }
}

pub fn pacbayes_terms(inputs: &BoundInputs) -> Result<BoundTerms, AnalysisError> {
    inputs.validate()?;
    let n = inputs.n as f64;
    let mn = (inputs.m * inputs.n) as f64;
    let kl_meta = inputs.eta_h_sq / (2.0 * inputs.alpha_h) + inputs.eta_v_sq / (2.0 * inputs.alpha_v);
    let kl_clients = inputs.theta_sq.iter().sum::<f64>() / (2.0 * inputs.alpha_theta);
    Ok(BoundTerms {
        empirical: inputs.empirical_loss,
        meta: ((kl_meta + (4.0 * n.sqrt() / inputs.delta).ln()) / (2.0 * n)).sqrt(),
        client: ((kl_clients + (8.0 * mn / inputs.delta).ln() + 1.0) / (2.0 * mn)).sqrt(),
    })
}

pub fn pacbayes_bound(inputs: &BoundInputs) -> Result<f64, AnalysisError> {
    Ok(pacbayes_terms(inputs)?.total())
}

/// Posterior widths and sampling budget for the Monte-Carlo bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConfig {
    pub alpha_h: f64,
    pub alpha_v: f64,
    pub alpha_theta: f64,
    pub delta: f64,
    pub samples: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig { alpha_h: 1.0, alpha_v: 1.0, alpha_theta: 1.0, delta: 0.05, samples: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundEstimate {
    pub mean: f64,
    /// Sample standard deviation over the Monte-Carlo draws; 0 for one draw.
    pub std: f64,
    pub draws: Vec<BoundTerms>,
}

fn perturbed<T: Scalar, R: Rng + ?Sized>(p: &[T], variance: f64, rng: &mut R) -> ParamVector<T> {
    let s = variance.sqrt();
    ParamVector(p.iter().map(|&x| T::of(x.as_f64() + s * rng.sample::<f64, _>(StandardNormal))).collect())
}

/// Monte-Carlo estimate of the bound for the Gaussian posteriors centred at
/// the server's weights. Each draw samples `η̄_h, η̄_v`, generates every
/// client's model, perturbs it with variance `α_θ` and scores its 0–1 loss
/// on the client's data; `m` is the smallest client sample count.
pub fn pacbayes_bound_mc<T: Scalar, R: Rng + ?Sized>(
    state: &ServerState<T>,
    clients: &[ExampleBatch<T>],
    client_model: &NetworkSpec,
    cfg: &BoundConfig,
    rng: &mut R,
) -> Result<BoundEstimate, AnalysisError> {
    if clients.is_empty() {
        return Err(AnalysisError::TooFew { what: "clients", needed: 1, got: 0 });
    }
    if cfg.samples == 0 {
        return Err(AnalysisError::Parameter("samples must be at least 1".into()));
    }
    let m = clients.iter().map(|c| c.len()).min().unwrap_or(0);
    let sq = |p: &[T]| p.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
    let mut draws = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let eta_h = perturbed(&state.eta_h, cfg.alpha_h, rng);
        let eta_v = perturbed(&state.eta_v, cfg.alpha_v, rng);
        let mut theta_sq = Vec::with_capacity(clients.len());
        let (mut wrong, mut total) = (0usize, 0usize);
        for data in clients {
            let v = compute_descriptor(data, &state.embed, &eta_v, state.embed_kind)?;
            let theta = generate_personal_model(&v, &eta_h, &state.hyper)?;
            theta_sq.push(sq(&theta));
            let sampled = perturbed(&theta, cfg.alpha_theta, rng);
            let acc = eval_accuracy(&sampled, client_model, data, None)?;
            wrong += data.len() - (acc * data.len() as f64).round() as usize;
            total += data.len();
        }
        draws.push(pacbayes_terms(&BoundInputs {
            alpha_h: cfg.alpha_h,
            alpha_v: cfg.alpha_v,
            alpha_theta: cfg.alpha_theta,
            delta: cfg.delta,
            n: clients.len(),
            m,
            eta_h_sq: sq(&state.eta_h),
            eta_v_sq: sq(&state.eta_v),
            theta_sq,
            empirical_loss: wrong as f64 / total as f64,
        })?);
    }
    let values: Vec<f64> = draws.iter().map(|d| d.total()).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BoundEstimate { mean, std, draws })
}

/// Regularisation weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Regularization {
    pub lambda_h: f64,
    pub lambda_v: f64,
    pub lambda_theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGradient<T> {
    pub value: f64,
    pub eta_h: Vec<T>,
    pub eta_v: Vec<T>,
}

impl<T: Scalar> ObjectiveGradient<T> {
    pub fn norm_sq(&self) -> f64 {
        self.eta_h.iter().chain(&self.eta_v).map(|g| g.as_f64() * g.as_f64()).sum()
    }
}

/// Value and exact gradient of
/// `λ_h‖η_h‖² + λ_v‖η_v‖² + (1/n) Σ_i [L(θ_i; S_i) + λ_θ‖θ_i‖²]`,
/// `θ_i = h(v(S_i; η_v); η_h)`, over full client datasets. The state is not
/// modified.
pub fn objective_gradient<T: Scalar>(
    state: &ServerState<T>,
    clients: &[ExampleBatch<T>],
    client_model: &NetworkSpec,
    reg: &Regularization,
) -> Result<ObjectiveGradient<T>, AnalysisError> {
    if clients.is_empty() {
        return Err(AnalysisError::TooFew { what: "clients", needed: 1, got: 0 });
    }
    let logits = if client_model.ends_with_softmax() { client_model.logits_spec() } else { client_model.clone() };
    let mut gh = vec![0.0f64; state.eta_h.len()];
    let mut gv = vec![0.0f64; state.eta_v.len()];
    let mut value = 0.0;
    for data in clients {
        let labels = data.labels().ok_or(AnalysisError::Unlabeled)?;
        let v = compute_descriptor(data, &state.embed, &state.eta_v, state.embed_kind)?;
        let theta = generate_personal_model(&v, &state.eta_h, &state.hyper)?;
        let trace = forward_trace(&logits, &theta, &data.images()?).map_err(ModelError::from)?;
        let (loss, g_out) = cross_entropy_loss(trace.output(), labels).map_err(ModelError::from)?;
        let (mut g_theta, _) = backward_trace(&logits, &theta, &trace, &g_out, false).map_err(ModelError::from)?;
        let lt = T::of(2.0 * reg.lambda_theta);
        for (g, &t) in g_theta.iter_mut().zip(theta.iter()) {
            *g += lt * t;
        }
        value += loss.as_f64() + reg.lambda_theta * theta.iter().map(|t| t.as_f64() * t.as_f64()).sum::<f64>();
        let (dh, dv) = hypernetwork_vjp(&v, &state.eta_h, &state.hyper, &g_theta)?;
        let dev = descriptor_vjp(data, &state.embed, &state.eta_v, state.embed_kind, &dv)?;
        for (a, g) in gh.iter_mut().zip(dh.iter()) {
            *a += g.as_f64();
        }
        for (a, g) in gv.iter_mut().zip(dev.iter()) {
            *a += g.as_f64();
        }
    }
    let n = clients.len() as f64;
    let sq = |p: &[T]| p.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
    value = value / n + reg.lambda_h * sq(&state.eta_h) + reg.lambda_v * sq(&state.eta_v);
    let finish = |acc: Vec<f64>, p: &[T], lambda: f64| -> Vec<T> {
        acc.into_iter().zip(p).map(|(a, w)| T::of(a / n + 2.0 * lambda * w.as_f64())).collect()
    };
    Ok(ObjectiveGradient {
        value,
        eta_h: finish(gh, &state.eta_h, reg.lambda_h),
        eta_v: finish(gv, &state.eta_v, reg.lambda_v),
    })
}

/// `‖∇F(η)‖²` at the current server weights.
pub fn grad_norm_sq<T: Scalar>(
    state: &ServerState<T>,
    clients: &[ExampleBatch<T>],
    client_model: &NetworkSpec,
    reg: &Regularization,
) -> Result<f64, AnalysisError> {
    Ok(objective_gradient(state, clients, client_model, reg)?.norm_sq())
}

/// Collects per-round squared gradient norms and their running mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradNormTracker {
    pub history: Vec<(u32, f64)>,
}

impl GradNormTracker {
    pub fn record<T: Scalar>(
        &mut self,
        round: u32,
        state: &ServerState<T>,
        clients: &[ExampleBatch<T>],
        client_model: &NetworkSpec,
        reg: &Regularization,
    ) -> Result<f64, AnalysisError> {
        let g = grad_norm_sq(state, clients, client_model, reg)?;
        self.history.push((round, g));
        Ok(g)
    }

    /// Mean of all recorded values up to and including each entry.
    pub fn running_mean(&self) -> Vec<f64> {
        let mut sum = 0.0;
        self.history
            .iter()
            .enumerate()
            .map(|(i, &(_, g))| {
                sum += g;
                sum / (i + 1) as f64
            })
            .collect()
    }
}

pub const METRICS_HEADER: &str = "round,train_client_acc,unseen_client_acc,mean_grad_norm_sq,bytes_up,bytes_down,spearman";

/// One line of the metrics table. Optional values are written as empty
/// fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub round: u32,
    pub train_client_acc: f64,
    pub unseen_client_acc: Option<f64>,
    pub mean_grad_norm_sq: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub spearman: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.train_client_acc,
            opt(self.unseen_client_acc),
            opt(self.mean_grad_norm_sq),
            self.bytes_up,
            self.bytes_down,
            opt(self.spearman)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self, AnalysisError> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(AnalysisError::Length { what: "metrics row fields", expected: 7, actual: f.len() });
        }
        let bad = |name: &str, v: &str| AnalysisError::Parameter(format!("bad {name} value `{v}`"));
        let opt = |name: &str, v: &str| -> Result<Option<f64>, AnalysisError> {
            if v.is_empty() { Ok(None) } else { v.parse().map(Some).map_err(|_| bad(name, v)) }
        };
        Ok(MetricsRow {
            round: f[0].parse().map_err(|_| bad("round", f[0]))?,
            train_client_acc: f[1].parse().map_err(|_| bad("train_client_acc", f[1]))?,
            unseen_client_acc: opt("unseen_client_acc", f[2])?,
            mean_grad_norm_sq: opt("mean_grad_norm_sq", f[3])?,
            bytes_up: f[4].parse().map_err(|_| bad("bytes_up", f[4]))?,
            bytes_down: f[5].parse().map_err(|_| bad("bytes_down", f[5]))?,
            spearman: opt("spearman", f[6])?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, AnalysisError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        other => return Err(AnalysisError::Parameter(format!("unexpected metrics header {other:?}"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::from_csv).collect()
}
