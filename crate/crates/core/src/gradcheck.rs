//! Central-difference gradient checks in 64-bit mode.
//!
//! Each case builds a small graph from named inputs, reduces its output to
//! a scalar, and compares [`Graph::backward`] against
//! [`finite_difference_gradient`] for every named tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::layers::{self, AttentionHead, ConvBlock, Dense, Direction, EmbeddingTable, LstmCell};
use crate::model::{build_model_as, ModelConfig, Network, EMBEDDING};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Step for the end-to-end check. With a loss near 1 the rounding noise of
/// a central difference is about `1e-16 / eps`; at 1e-5 that swamps the
/// handful of weights whose true gradient happens to sit near 1e-8.
pub const MODEL_EPS: f64 = 1e-4;
pub const LAYER_THRESHOLD: f64 = 1e-6;
pub const MODEL_THRESHOLD: f64 = 1e-4;
/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element `i`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    /// `case/parameter`.
    pub group: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub elements: usize,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Step for the per-layer checks.
    pub eps: f64,
    /// Step for the end-to-end check.
    pub model_eps: f64,
    pub seed: u64,
    /// Test hook: halves the analytic tanh derivative.
    pub corrupt_tanh_grad: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            model_eps: MODEL_EPS,
            seed: 7,
            corrupt_tanh_grad: false,
        }
    }
}

/// Compares analytic and numeric gradients of `build` for every tensor in
/// `inputs`. `build` must return a scalar node and be deterministic.
pub fn check_case<F>(
    case: &str,
    inputs: &Parameters<f64>,
    threshold: f64,
    opts: &GradCheckOptions,
    build: F,
) -> Result<Vec<GroupReport>>
where
    F: Fn(&mut Graph<f64>, &Parameters<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    g.set_tanh_grad_fault(opts.corrupt_tanh_grad);
    let loss = build(&mut g, inputs)?;
    let grads = g.backward(loss)?;

    let mut out = Vec::new();
    for (name, value) in inputs.iter() {
        let analytic = match grads.get(name) {
            Some(t) => t.clone(),
            None => Tensor::zeros(value.shape().to_vec()),
        };
        let numeric = finite_difference_gradient(
            |probe| {
                let mut p = inputs.clone();
                *p.get_mut(name)? = probe.clone();
                let mut g = Graph::new();
                let loss = build(&mut g, &p)?;
                Ok(g.value(loss).data()[0])
            },
            value,
            opts.eps,
        )?;
        let max_rel_err = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        out.push(GroupReport {
            group: format!("{case}/{name}"),
            max_rel_err,
            threshold,
            elements: value.len(),
        });
    }
    Ok(out)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("non-empty shape")
}

/// Reduces `out` to `Σ out ⊙ R` with a fixed random `R`, so every output
/// element carries a distinct weight.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let weights = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37));
    let w = g.constant(weights);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn inputs(specs: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> Parameters<f64> {
    let mut p = Parameters::new();
    for (name, shape) in specs {
        p.insert(*name, random(shape, rng));
    }
    p
}

/// Per-op and per-layer checks at [`LAYER_THRESHOLD`].
pub fn layer_checks(opts: &GradCheckOptions) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seed = opts.seed;
    let t = LAYER_THRESHOLD;
    let mut out = Vec::new();

    let p = inputs(&[("a", &[3, 4]), ("b", &[4, 2])], &mut rng);
    out.extend(check_case("matmul", &p, t, opts, |g, p| {
        let (a, b) = (p.bind(g, "a")?, p.bind(g, "b")?);
        let y = g.matmul(a, b)?;
        project(g, y, seed)
    })?);

    let p = inputs(&[("x", &[3, 4]), ("y", &[3, 4]), ("bias", &[4])], &mut rng);
    out.extend(check_case("elementwise", &p, t, opts, |g, p| {
        let (x, y, b) = (p.bind(g, "x")?, p.bind(g, "y")?, p.bind(g, "bias")?);
        let s = g.add(x, b)?;
        let d = g.sub(s, y)?;
        // x feeds two consumers.
        let m = g.mul(d, x)?;
        project(g, m, seed)
    })?);

    let p = inputs(&[("x", &[2, 5])], &mut rng);
    out.extend(check_case("activations", &p, t, opts, |g, p| {
        let x = p.bind(g, "x")?;
        let (r, th, sg) = (g.relu(x), g.tanh(x), g.sigmoid(x));
        let y = g.concat(&[r, th, sg], 1)?;
        project(g, y, seed)
    })?);

    let p = inputs(&[("v", &[6])], &mut rng);
    out.extend(check_case("softmax", &p, t, opts, |g, p| {
        let v = p.bind(g, "v")?;
        let s = g.softmax(v)?;
        project(g, s, seed)
    })?);

    let p = inputs(&[("a", &[2, 3]), ("b", &[2, 5]), ("c", &[1, 8])], &mut rng);
    out.extend(check_case("concat_slice", &p, t, opts, |g, p| {
        let (a, b, c) = (p.bind(g, "a")?, p.bind(g, "b")?, p.bind(g, "c")?);
        let ab = g.concat(&[a, b], 1)?;
        let abc = g.concat(&[ab, c], 0)?;
        let mid = g.slice(abc, 1, 2, 6)?;
        let flat = g.reshape(mid, &[12])?;
        let y = g.scale(flat, 0.5);
        project(g, y, seed)
    })?);

    let p = inputs(&[("x", &[7, 3])], &mut rng);
    out.extend(check_case("unfold_max_pool", &p, t, opts, |g, p| {
        let x = p.bind(g, "x")?;
        let u = g.unfold(x, 4, 2)?;
        let m = g.max_pool(u, 2, 2)?;
        project(g, m, seed)
    })?);

    let p = inputs(&[("logits", &[4])], &mut rng);
    out.extend(check_case("nll_mean", &p, t, opts, |g, p| {
        let v = p.bind(g, "logits")?;
        let s = g.softmax(v)?;
        let l0 = g.nll(s, 1)?;
        let l1 = g.nll(s, 3)?;
        g.mean(&[l0, l1])
    })?);

    let p = inputs(&[("embedding", &[6, 3])], &mut rng);
    out.extend(check_case("embedding", &p, t, opts, |g, p| {
        let table = EmbeddingTable::bind(g, p, "embedding", true)?;
        let x = layers::embed(g, &[1, 3, 3, 0, 5], &table)?;
        project(g, x, seed)
    })?);

    let mut p = inputs(&[("x", &[8, 4])], &mut rng);
    ConvBlock::init(&mut p, "conv", &[2, 3], 4, 2, &mut rng)?;
    for b in ["conv.b2", "conv.b3"] {
        p.insert(b, random(&[2], &mut rng));
    }
    out.extend(check_case("conv1d", &p, t, opts, |g, p| {
        let x = p.bind(g, "x")?;
        let block = ConvBlock::bind(g, p, "conv", &[2, 3], 4, 2)?;
        let a = layers::conv1d(g, x, &block, 2)?;
        let b = layers::conv1d(g, x, &block, 3)?;
        let y = g.concat(&[a, b], 1)?;
        project(g, y, seed)
    })?);

    let mut p = inputs(&[("x", &[4, 3])], &mut rng);
    LstmCell::init(&mut p, "fwd", 3, 3, &mut rng);
    LstmCell::init(&mut p, "bwd", 3, 3, &mut rng);
    out.extend(check_case("bilstm", &p, t, opts, |g, p| {
        let x = p.bind(g, "x")?;
        let f = LstmCell::bind(g, p, "fwd", 3, 3)?;
        let b = LstmCell::bind(g, p, "bwd", 3, 3)?;
        let y = layers::bilstm_forward(g, x, &f, &b)?;
        project(g, y, seed)
    })?);

    let mut p = inputs(&[("x", &[4, 3])], &mut rng);
    LstmCell::init(&mut p, "cell", 3, 3, &mut rng);
    out.extend(check_case("lstm_cells", &p, t, opts, |g, p| {
        let x = p.bind(g, "x")?;
        let c = LstmCell::bind(g, p, "cell", 3, 3)?;
        let s = layers::lstm_states(g, x, &c, Direction::Backward)?;
        let y = g.concat(&[s.hidden, s.cells], 1)?;
        project(g, y, seed)
    })?);

    let mut p = inputs(&[("states", &[5, 4])], &mut rng);
    AttentionHead::init(&mut p, "attention", 4, 3, &mut rng);
    p.insert("attention.b", random(&[3], &mut rng));
    out.extend(check_case("attention", &p, t, opts, |g, p| {
        let h = p.bind(g, "states")?;
        let head = AttentionHead::bind(g, p, "attention", 4, 3)?;
        let (c, alpha) = layers::attention(g, h, &head)?;
        let y = g.concat(&[c, alpha], 0)?;
        project(g, y, seed)
    })?);

    let mut p = inputs(&[("context", &[4])], &mut rng);
    Dense::init(&mut p, "classifier", 4, 3, &mut rng);
    p.insert("classifier.b", random(&[3], &mut rng));
    out.extend(check_case("dense_softmax", &p, t, opts, |g, p| {
        let c = p.bind(g, "context")?;
        let head = Dense::bind(g, p, "classifier", 4, 3)?;
        let probs = layers::dense_softmax(g, c, &head)?;
        g.nll(probs, 2)
    })?);

    let p = inputs(&[("x", &[4, 5])], &mut rng);
    out.extend(check_case("dropout", &p, t, opts, |g, p| {
        let x = p.bind(g, "x")?;
        // Same mask on every evaluation.
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        let y = layers::dropout(g, x, 0.5, true, &mut mask_rng)?;
        project(g, y, seed)
    })?);

    Ok(out)
}

/// The small configuration used for the end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        embed_dim: 8,
        max_len: 12,
        filters: 4,
        lstm_hidden: 8,
        classes: 3,
        ..ModelConfig::default()
    }
}

/// Parameters drawn from `U[-0.5, 0.5]`, padding row kept at zero.
///
/// At initialisation the attention vector is small, so the scores are
/// nearly flat and the attention projection receives gradients near
/// 1e-9, where central differences lose most of their digits to
/// cancellation. A generic point keeps every group well scaled.
fn check_point(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Parameters<f64>> {
    let mut params = build_model_as::<f64>(config)?;
    for (name, t) in params.iter_mut() {
        let skip = if name == EMBEDDING { config.embed_dim } else { 0 };
        for v in &mut t.data_mut()[skip..] {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    Ok(params)
}

/// Full-model loss check for every named parameter at [`MODEL_THRESHOLD`].
pub fn model_check(opts: &GradCheckOptions) -> Result<Vec<GroupReport>> {
    let config = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let params = check_point(&config, &mut rng)?;
    // Nine real tokens then padding.
    let ids: Vec<usize> = (0..config.max_len)
        .map(|i| if i < 9 { rng.gen_range(1..config.vocab_size) } else { 0 })
        .collect();
    let target = 1;
    let opts = GradCheckOptions {
        eps: opts.model_eps,
        ..*opts
    };
    check_case("model", &params, MODEL_THRESHOLD, &opts, |g, p| {
        let net = Network::bind(g, p, &config)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward(g, &ids, false, &mut unused)?;
        g.nll(out.probs, target)
    })
}

/// Layer checks followed by the end-to-end check.
pub fn run_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut groups = layer_checks(opts)?;
    groups.extend(model_check(opts)?);
    Ok(GradCheckReport { groups })
}
