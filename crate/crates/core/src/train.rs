//! Adversarial training loop, L1 regression baseline, optimizer, metrics
//! and checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{FrameCache, SampleTuple, TupleRef};
use crate::checkpoint::{restore_store, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{
    cutmix_batch, cutmix_pixel_term, fake_patch_term, generator_loss, l1_regression_loss, real_patch_term,
    DiscriminatorTerms,
};
use crate::models::{
    condition_vector, discriminator_stack, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
    GeneratorInput, LatentSpec, CONDITION_CHANNELS, IMAGE_CHANNELS,
};
use crate::nn::{split_channels, Gradients, Mode, TensorStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub d_steps_per_g_step: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 5e-5,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
            batch_size: 16,
            steps: 100_000,
            d_steps_per_g_step: 1,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) || !self.lr_g.is_finite() || !self.lr_d.is_finite() {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return bad("batch_size and d_steps_per_g_step must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Adversarial,
    L1Baseline,
}

/// Everything a training run is configured by; serialized as TOML by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub seed: u64,
    pub lambda: f64,
    pub sigma_train: f64,
    pub cutmix_probability: f64,
    pub checkpoint_every: u64,
    pub probe_every: u64,
    pub probe_pairs: usize,
    pub optimizer: OptimizerSettings,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Adversarial,
            seed: 0,
            lambda: 1.0,
            sigma_train: 1.0,
            cutmix_probability: 0.5,
            checkpoint_every: 1000,
            probe_every: 100,
            probe_pairs: 4,
            optimizer: OptimizerSettings::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let g = &self.generator;
        let d = &self.discriminator;
        if (g.input_h, g.input_w) != (d.input_h, d.input_w) {
            return Err(Error::Config("generator and discriminator input sizes differ".into()));
        }
        if !(0.0..=1.0).contains(&self.cutmix_probability) {
            return Err(Error::Config("cutmix_probability must lie in [0, 1]".into()));
        }
        if !(self.lambda >= 0.0) || !(self.sigma_train >= 0.0) {
            return Err(Error::Config("lambda and sigma_train must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are parallel to a [`TensorStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: TensorStore,
    pub v: TensorStore,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &TensorStore) -> Self {
        let zeros = || {
            let mut s = TensorStore::new();
            for (name, v) in params.names().iter().zip(params.values()) {
                s.push(name.clone(), ArrayD::zeros(IxDyn(v.shape())));
            }
            s
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Descends `grads` (or ascends when `ascend` is set).
    pub fn step(&mut self, params: &mut TensorStore, grads: &Gradients, lr: f64, settings: &OptimizerSettings, ascend: bool) {
        self.t += 1;
        let (b1, b2) = (settings.beta1, settings.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let sign = if ascend { -1.0 } else { 1.0 };
        let n = params.len();
        for i in 0..n {
            let g = &grads.tensors[i];
            let m = &mut self.m.values_mut()[i];
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * sign * g);
            let v = &mut self.v.values_mut()[i];
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = &self.m.values()[i];
            let v = &self.v.values()[i];
            Zip::from(&mut params.values_mut()[i]).and(m).and(v).for_each(|p, &m, &v| {
                let update = lr * (m / c1) / ((v / c2).sqrt() + settings.eps);
                *p -= update;
            });
        }
    }
}

/// Stacked tensors for one optimization step.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(N, 3, H, W)`
    pub i0: Array4<f64>,
    /// `(N, 3, H, W)`
    pub it: Array4<f64>,
    /// `(N, 62)`
    pub condition: Array2<f64>,
    /// One line per element identifying its source tuple.
    pub manifest: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.i0.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks tuples whose descriptors were normalized with `normalizer_id`.
    pub fn from_tuples(tuples: &[SampleTuple], normalizer_id: &str) -> Result<Self> {
        let first = tuples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (h, w) = (first.i0.height(), first.i0.width());
        let n = tuples.len();
        let mut i0 = Array4::zeros((n, IMAGE_CHANNELS, h, w));
        let mut it = Array4::zeros((n, IMAGE_CHANNELS, h, w));
        let mut condition = Array2::zeros((n, CONDITION_CHANNELS));
        let mut manifest = Vec::with_capacity(n);
        for (b, t) in tuples.iter().enumerate() {
            t.w0.require_normalizer(normalizer_id)?;
            t.wt.require_normalizer(normalizer_id)?;
            if (t.i0.height(), t.i0.width(), t.it.height(), t.it.width()) != (h, w, h, w) {
                return Err(Error::Shape("batch images differ in size".into()));
            }
            i0.index_axis_mut(Axis(0), b).assign(&t.i0.to_nchw().index_axis(Axis(0), 0));
            it.index_axis_mut(Axis(0), b).assign(&t.it.to_nchw().index_axis(Axis(0), 0));
            condition.row_mut(b).assign(&condition_vector(&t.w0, &t.wt));
            manifest.push(format!("{} -> {} (+{} min)", t.t0.to_rfc3339(), t.t.to_rfc3339(), t.lead_minutes));
        }
        Ok(Self {
            i0,
            it,
            condition,
            manifest,
        })
    }

    fn manifest_text(&self) -> String {
        self.manifest.join("; ")
    }
}

/// Per-step loss components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub real_patch: Option<f64>,
    pub fake_patch: Option<f64>,
    pub cutmix_pixel: Option<f64>,
    pub gen_adversarial: Option<f64>,
    pub diversity: Option<f64>,
    /// L1 baseline loss (regression mode only).
    pub l1: Option<f64>,
    pub cutmix_applied: bool,
    /// Mean patch probability on real and generated inputs (D step).
    pub d_real_prob: Option<f64>,
    pub d_fake_prob: Option<f64>,
    pub diversity_probe: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl StepMetrics {
    fn empty(step: u64) -> Self {
        Self {
            step,
            real_patch: None,
            fake_patch: None,
            cutmix_pixel: None,
            gen_adversarial: None,
            diversity: None,
            l1: None,
            cutmix_applied: false,
            d_real_prob: None,
            d_fake_prob: None,
            diversity_probe: None,
            wall_time_s: None,
        }
    }

    /// The five adversarial components in log order.
    pub fn adversarial_components(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("real_patch", self.real_patch),
            ("fake_patch", self.fake_patch),
            ("cutmix_pixel", self.cutmix_pixel),
            ("gen_adversarial", self.gen_adversarial),
            ("diversity", self.diversity),
        ]
    }
}

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "real_patch",
    "fake_patch",
    "cutmix_pixel",
    "gen_adversarial",
    "diversity",
    "cutmix_applied",
    "l1",
    "diversity_probe",
    "wall_time_s",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.9e}")).unwrap_or_default()
}

/// Appends metrics rows to a CSV file, writing the header for a new file.
pub fn append_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        w.write_record([
            r.step.to_string(),
            opt(r.real_patch),
            opt(r.fake_patch),
            opt(r.cutmix_pixel),
            opt(r.gen_adversarial),
            opt(r.diversity),
            (r.cutmix_applied as u8).to_string(),
            opt(r.l1),
            opt(r.diversity_probe),
            r.wall_time_s.map(|t| format!("{t:.3}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Hyper-parameters echoed next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub lr_d: f64,
    pub lr_g: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub sigma_train: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub d_steps_per_g_step: usize,
    pub cutmix_probability: f64,
    pub mode: TrainingMode,
    pub seed: u64,
    pub normalizer_id: String,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, normalizer_id: &str) -> Self {
        let o = &config.optimizer;
        Self {
            lr_d: o.lr_d,
            lr_g: o.lr_g,
            beta1: o.beta1,
            beta2: o.beta2,
            lambda: config.lambda,
            sigma_train: config.sigma_train,
            batch_size: o.batch_size,
            steps: o.steps,
            d_steps_per_g_step: o.d_steps_per_g_step,
            cutmix_probability: config.cutmix_probability,
            mode: config.mode,
            seed: config.seed,
            normalizer_id: normalizer_id.to_string(),
            generator: config.generator.clone(),
            discriminator: config.discriminator.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .clone()
            .try_into()
            .map_err(|_| Error::Checkpoint("bad RNG seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(
            self.word_pos
                .parse()
                .map_err(|_| Error::Checkpoint("bad RNG position".into()))?,
        );
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    step: u64,
    config: TrainConfig,
    normalizer_id: String,
    rng: RngState,
    adam_g_t: u64,
    adam_d_t: u64,
}

const STATE_KIND: &str = "train_state";

/// Complete training state: networks, optimizer moments, RNG and step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub config: TrainConfig,
    pub normalizer_id: String,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks seeded from `config.seed`.
    pub fn new(config: TrainConfig, normalizer_id: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), config.seed.wrapping_add(1))?;
        let adam_g = Adam::new(&generator.params);
        let adam_d = Adam::new(&discriminator.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            step: 0,
            config,
            normalizer_id: normalizer_id.into(),
            generator,
            discriminator,
            adam_g,
            adam_d,
            rng,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = StateMeta {
            kind: STATE_KIND.into(),
            step: self.step,
            config: self.config.clone(),
            normalizer_id: self.normalizer_id.clone(),
            rng: RngState::capture(&self.rng),
            adam_g_t: self.adam_g.t,
            adam_d_t: self.adam_d.t,
        };
        Checkpoint {
            meta: serde_json::to_value(meta).expect("serializable meta"),
            stores: vec![
                ("generator.params".into(), self.generator.params.clone()),
                ("generator.buffers".into(), self.generator.buffers.clone()),
                ("discriminator.params".into(), self.discriminator.params.clone()),
                ("discriminator.buffers".into(), self.discriminator.buffers.clone()),
                ("adam_g.m".into(), self.adam_g.m.clone()),
                ("adam_g.v".into(), self.adam_g.v.clone()),
                ("adam_d.m".into(), self.adam_d.m.clone()),
                ("adam_d.v".into(), self.adam_d.v.clone()),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.kind != STATE_KIND {
            return Err(Error::Checkpoint(format!("unexpected checkpoint kind `{}`", meta.kind)));
        }
        let mut state = Self::new(meta.config, meta.normalizer_id)?;
        state.step = meta.step;
        state.rng = meta.rng.restore()?;
        restore_store(&mut state.generator.params, ck.store("generator.params")?)?;
        restore_store(&mut state.generator.buffers, ck.store("generator.buffers")?)?;
        restore_store(&mut state.discriminator.params, ck.store("discriminator.params")?)?;
        restore_store(&mut state.discriminator.buffers, ck.store("discriminator.buffers")?)?;
        restore_store(&mut state.adam_g.m, ck.store("adam_g.m")?)?;
        restore_store(&mut state.adam_g.v, ck.store("adam_g.v")?)?;
        restore_store(&mut state.adam_d.m, ck.store("adam_d.m")?)?;
        restore_store(&mut state.adam_d.v, ck.store("adam_d.v")?)?;
        state.adam_g.t = meta.adam_g_t;
        state.adam_d.t = meta.adam_d_t;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Short content hash of the generator weights.
    pub fn checkpoint_id(&self) -> String {
        generator_id(&self.generator)
    }
}

/// FNV-1a over the generator's parameter bits, rendered as hex.
pub fn generator_id(g: &Generator) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in g.params.values().iter().chain(g.buffers.values()) {
        for v in t.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

fn ensure_finite(step: u64, component: &str, value: f64, batch: &Batch) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            component: component.into(),
            manifest: batch.manifest_text(),
        })
    }
}

fn ensure_finite_grads(step: u64, component: &str, grads: &Gradients, batch: &Batch) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            component: format!("{component} gradient"),
            manifest: batch.manifest_text(),
        })
    }
}

fn mean(a: &Array4<f64>) -> f64 {
    a.mean().unwrap_or(0.0)
}

/// One discriminator update followed by one generator update (or a single
/// regression update in baseline mode). Returns the recorded metrics.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    match state.config.mode {
        TrainingMode::Adversarial => adversarial_step(state, batch),
        TrainingMode::L1Baseline => l1_step(state, batch),
    }
}

fn l1_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    let step = state.step + 1;
    let g = &mut state.generator;
    g.power_iterate();
    let input = GeneratorInput {
        image: batch.i0.clone(),
        condition: batch.condition.clone(),
        z: Array2::zeros((batch.len(), g.config.latent_dim)),
    };
    let (out, cache) = g.forward(&input, Mode::Train)?;
    g.commit_batch_stats(&cache);
    let (loss, grad) = l1_regression_loss(&out, &batch.it);
    ensure_finite(step, "l1", loss, batch)?;
    let mut grads = g.params.zeros_like();
    g.backward(&cache, &grad, &mut grads);
    ensure_finite_grads(step, "generator", &grads, batch)?;
    state
        .adam_g
        .step(&mut g.params, &grads, state.config.optimizer.lr_g, &state.config.optimizer, false);
    state.step = step;
    let mut m = StepMetrics::empty(step);
    m.l1 = Some(loss);
    Ok(m)
}

fn adversarial_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    let step = state.step + 1;
    let n = batch.len();
    let cfg = state.config.clone();
    let latent = LatentSpec::new(cfg.generator.latent_dim, cfg.sigma_train)?;
    let z1 = latent.sample(n, &mut state.rng);
    let z2 = latent.sample(n, &mut state.rng);

    let g = &mut state.generator;
    g.power_iterate();
    let in1 = GeneratorInput {
        image: batch.i0.clone(),
        condition: batch.condition.clone(),
        z: z1,
    };
    let in2 = GeneratorInput { z: z2, ..in1.clone() };
    let (fake1, gc1) = g.forward(&in1, Mode::Train)?;
    let (fake2, gc2) = g.forward(&in2, Mode::Train)?;
    g.commit_batch_stats(&gc1);
    g.commit_batch_stats(&gc2);

    let real_stack = discriminator_stack(&batch.it, &batch.i0, &batch.condition);
    let fake_stack = discriminator_stack(&fake1, &batch.i0, &batch.condition);
    let mut metrics = StepMetrics::empty(step);

    for _ in 0..cfg.optimizer.d_steps_per_g_step {
        let d = &mut state.discriminator;
        d.power_iterate();
        let mut grads = d.params.zeros_like();
        let (out_r, cr) = d.forward(&real_stack, Mode::Train)?;
        let (real_patch, g_r) = real_patch_term(&out_r.patch);
        d.backward(&cr, &g_r, &Array4::zeros(out_r.pixel.dim()), &mut grads);
        let (out_f, cf) = d.forward(&fake_stack, Mode::Train)?;
        let (fake_patch, g_f) = fake_patch_term(&out_f.patch);
        d.backward(&cf, &g_f, &Array4::zeros(out_f.pixel.dim()), &mut grads);
        let apply_cutmix = state.rng.random_bool(cfg.cutmix_probability);
        let cutmix_pixel = if apply_cutmix {
            let (composite, mask) = cutmix_batch(&real_stack, &fake_stack, &mut state.rng);
            let (out_c, cc) = d.forward(&composite, Mode::Train)?;
            let (v, g_c) = cutmix_pixel_term(&out_c.pixel, &mask);
            d.backward(&cc, &Array4::zeros(out_c.patch.dim()), &g_c, &mut grads);
            Some(v)
        } else {
            None
        };
        d.commit_batch_stats(&cr);
        d.commit_batch_stats(&cf);
        let terms = DiscriminatorTerms {
            real_patch,
            fake_patch,
            cutmix_pixel,
        };
        ensure_finite(step, "real_patch", real_patch, batch)?;
        ensure_finite(step, "fake_patch", fake_patch, batch)?;
        ensure_finite(step, "cutmix_pixel", terms.cutmix_pixel.unwrap_or(0.0), batch)?;
        ensure_finite_grads(step, "discriminator", &grads, batch)?;
        state
            .adam_d
            .step(&mut d.params, &grads, cfg.optimizer.lr_d, &cfg.optimizer, true);
        metrics.real_patch = Some(real_patch);
        metrics.fake_patch = Some(fake_patch);
        metrics.cutmix_pixel = cutmix_pixel;
        metrics.cutmix_applied = apply_cutmix;
        metrics.d_real_prob = Some(mean(&out_r.patch));
        metrics.d_fake_prob = Some(mean(&out_f.patch));
    }

    let d = &state.discriminator;
    let fake_stack2 = discriminator_stack(&fake2, &batch.i0, &batch.condition);
    let (o1, dc1) = d.forward(&fake_stack, Mode::Train)?;
    let (o2, dc2) = d.forward(&fake_stack2, Mode::Train)?;
    let (terms, lg) = generator_loss([&o1, &o2], [&fake1, &fake2], cfg.lambda);
    ensure_finite(step, "gen_adversarial", terms.adversarial(), batch)?;
    ensure_finite(step, "diversity", terms.diversity, batch)?;
    let mut scratch = d.params.zeros_like();
    let gs1 = d.backward(&dc1, &lg.patch[0], &lg.pixel[0], &mut scratch);
    let gs2 = d.backward(&dc2, &lg.patch[1], &lg.pixel[1], &mut scratch);
    let (gi1, _) = split_channels(&gs1, IMAGE_CHANNELS);
    let (gi2, _) = split_channels(&gs2, IMAGE_CHANNELS);
    let g = &mut state.generator;
    let mut grads = g.params.zeros_like();
    g.backward(&gc1, &(gi1 + &lg.image[0]), &mut grads);
    g.backward(&gc2, &(gi2 + &lg.image[1]), &mut grads);
    ensure_finite_grads(step, "generator", &grads, batch)?;
    state
        .adam_g
        .step(&mut g.params, &grads, cfg.optimizer.lr_g, &cfg.optimizer, false);

    metrics.gen_adversarial = Some(terms.adversarial());
    metrics.diversity = Some(terms.diversity);
    state.step = step;
    Ok(metrics)
}

/// Mean over `n_pairs` of the mean absolute difference between generator
/// outputs for two independent latent draws at scale `sigma`.
pub fn diversity_metric<R: Rng>(
    g: &Generator,
    i0: &Array4<f64>,
    condition: &Array2<f64>,
    sigma: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    let latent = LatentSpec::new(g.config.latent_dim, sigma)?;
    let n = i0.dim().0;
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let a = GeneratorInput {
            image: i0.clone(),
            condition: condition.clone(),
            z: latent.sample(n, rng),
        };
        let b = GeneratorInput {
            z: latent.sample(n, rng),
            ..a.clone()
        };
        let (ya, _) = g.forward(&a, Mode::Eval)?;
        let (yb, _) = g.forward(&b, Mode::Eval)?;
        total += (&ya - &yb).mapv(f64::abs).mean().unwrap_or(0.0);
    }
    Ok(total / n_pairs as f64)
}

/// Supplies training batches; draws randomness from the training RNG so
/// that runs are reproducible from a checkpoint.
pub trait BatchSource {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch>;
}

/// Samples batches uniformly (with replacement) from in-memory tuples.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub tuples: Vec<SampleTuple>,
    pub normalizer_id: String,
}

impl BatchSource for InMemoryDataset {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if self.tuples.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let picks: Vec<SampleTuple> = (0..batch_size)
            .map(|_| self.tuples[rng.random_range(0..self.tuples.len())].clone())
            .collect();
        Batch::from_tuples(&picks, &self.normalizer_id)
    }
}

/// Samples tuple references and decodes their frames lazily.
#[derive(Debug)]
pub struct ArchiveDataset {
    pub cache: FrameCache,
    pub tuples: Vec<TupleRef>,
    pub normalizer_id: String,
}

impl BatchSource for ArchiveDataset {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if self.tuples.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let mut picks = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let t = &self.tuples[rng.random_range(0..self.tuples.len())];
            picks.push(self.cache.materialize(t)?);
        }
        Batch::from_tuples(&picks, &self.normalizer_id)
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub run_dir: Option<PathBuf>,
    /// Single-example batch used for the diversity probe.
    pub probe: Option<Batch>,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("checkpoint_{step:08}.ckpt"))
}

/// Runs steps until `config.optimizer.steps` is reached, writing metrics,
/// periodic checkpoints and the run manifest when a run directory is set.
pub fn fit(state: &mut TrainState, source: &mut dyn BatchSource, options: &FitOptions) -> Result<Vec<StepMetrics>> {
    let start = Instant::now();
    let total = state.config.optimizer.steps;
    if let Some(dir) = &options.run_dir {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest::new(&state.config, &state.normalizer_id);
        let mut f = std::fs::File::create(dir.join("run_manifest.json"))?;
        f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    }
    let mut history = Vec::new();
    let mut pending = Vec::new();
    while state.step < total {
        let batch = source.next_batch(state.config.optimizer.batch_size, &mut state.rng)?;
        let mut m = train_step(state, &batch)?;
        if let Some(probe) = &options.probe {
            let every = state.config.probe_every.max(1);
            if state.step % every == 0 || state.step == total {
                let mut probe_rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ state.step);
                m.diversity_probe = Some(diversity_metric(
                    &state.generator,
                    &probe.i0,
                    &probe.condition,
                    state.config.sigma_train,
                    state.config.probe_pairs.max(1),
                    &mut probe_rng,
                )?);
            }
        }
        m.wall_time_s = Some(start.elapsed().as_secs_f64());
        log::debug!("step {} {:?}", m.step, m.adversarial_components());
        pending.push(m.clone());
        history.push(m);
        if let Some(dir) = &options.run_dir {
            let every = state.config.checkpoint_every;
            let due = (every > 0 && state.step % every == 0) || state.step == total;
            if due || pending.len() >= 100 {
                append_metrics(&dir.join("metrics.csv"), &pending)?;
                pending.clear();
            }
            if due {
                state.save(&checkpoint_path(dir, state.step))?;
            }
        }
    }
    if let Some(dir) = &options.run_dir {
        if !pending.is_empty() {
            append_metrics(&dir.join("metrics.csv"), &pending)?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(mode: TrainingMode) -> TrainConfig {
        TrainConfig {
            mode,
            seed: 3,
            optimizer: OptimizerSettings {
                batch_size: 2,
                steps: 3,
                ..Default::default()
            },
            generator: GeneratorConfig {
                stages: 1,
                base_channels: 4,
                latent_dim: 4,
                latent_channels: 2,
                input_h: 4,
                input_w: 8,
            },
            discriminator: DiscriminatorConfig {
                stages: 1,
                base_channels: 4,
                input_h: 4,
                input_w: 8,
            },
            ..Default::default()
        }
    }

    fn toy_batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            i0: Array4::from_shape_simple_fn((2, 3, 4, 8), || rng.random_range(-1.0..1.0)),
            it: Array4::from_shape_simple_fn((2, 3, 4, 8), || rng.random_range(-1.0..1.0)),
            condition: Array2::from_shape_simple_fn((2, CONDITION_CHANNELS), || rng.random_range(-1.0..1.0)),
            manifest: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn default_rates_have_two_to_one_ratio() {
        let o = OptimizerSettings::default();
        assert_eq!(o.lr_d / o.lr_g, 0.5);
        assert_eq!((o.beta1, o.beta2), (0.0, 0.9));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = TensorStore::new();
        s.push("w", ArrayD::from_elem(IxDyn(&[3]), 0.25));
        let before = s.clone();
        let mut adam = Adam::new(&s);
        let grads = s.zeros_like();
        adam.step(&mut s, &grads, 1e-3, &OptimizerSettings::default(), false);
        assert_eq!(s, before);
    }

    #[test]
    fn adversarial_step_records_five_components() {
        let mut st = TrainState::new(toy_config(TrainingMode::Adversarial), "n").unwrap();
        st.config.cutmix_probability = 1.0;
        let m = train_step(&mut st, &toy_batch(1)).unwrap();
        assert_eq!(m.step, 1);
        assert!(m.adversarial_components().iter().all(|(_, v)| v.is_some_and(f64::is_finite)));
        assert!(m.cutmix_applied);
    }

    #[test]
    fn l1_mode_leaves_discriminator_untouched() {
        let mut st = TrainState::new(toy_config(TrainingMode::L1Baseline), "n").unwrap();
        let d_before = st.discriminator.params.clone();
        let db_before = st.discriminator.buffers.clone();
        let g_before = st.generator.params.clone();
        for s in 0..3 {
            let m = train_step(&mut st, &toy_batch(s)).unwrap();
            assert!(m.l1.is_some() && m.real_patch.is_none());
        }
        assert_eq!(st.discriminator.params, d_before);
        assert_eq!(st.discriminator.buffers, db_before);
        assert_ne!(st.generator.params, g_before);
    }

    #[test]
    fn zero_learning_rates_keep_parameters() {
        let mut cfg = toy_config(TrainingMode::Adversarial);
        cfg.optimizer.lr_g = 0.0;
        cfg.optimizer.lr_d = 0.0;
        let mut st = TrainState::new(cfg, "n").unwrap();
        let g0 = st.generator.params.clone();
        let d0 = st.discriminator.params.clone();
        let m = train_step(&mut st, &toy_batch(2)).unwrap();
        assert!(m.real_patch.is_some());
        assert_eq!(st.generator.params, g0);
        assert_eq!(st.discriminator.params, d0);
    }

    #[test]
    fn non_finite_input_aborts_with_manifest() {
        let mut st = TrainState::new(toy_config(TrainingMode::L1Baseline), "n").unwrap();
        let mut b = toy_batch(1);
        b.it[[0, 0, 0, 0]] = f64::NAN;
        match train_step(&mut st, &b) {
            Err(Error::NonFinite { manifest, step, .. }) => {
                assert_eq!(step, 1);
                assert!(manifest.contains('a'));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn diversity_is_zero_without_noise() {
        let st = TrainState::new(toy_config(TrainingMode::Adversarial), "n").unwrap();
        let b = toy_batch(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(diversity_metric(&st.generator, &b.i0, &b.condition, 0.0, 3, &mut rng).unwrap(), 0.0);
        assert!(diversity_metric(&st.generator, &b.i0, &b.condition, 1.0, 3, &mut rng).unwrap() > 0.0);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let mut back = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
