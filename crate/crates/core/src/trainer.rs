//! Round-robin optimization: normal iterations on the raw density, spiking
//! iterations on the gated density with the color network held fixed.

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffcore::{GradBuffer, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{fd_gradient_on_tape, FieldConfig, FieldParams, ParamGroup};
use crate::losses::{self, LossLog, LossReport, LossWeights, Stage, StageTerms};
use crate::math::Vec3;
use crate::rendering::{render_on_tape, SampleBatch, SamplerConfig};
use crate::scenes::{self, ray_batch, SceneDataset, SyntheticConfig};
use crate::spiking::{fif_gate, GateOptions, InputGradRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSource {
    Synthetic(SyntheticConfig),
    Blender {
        path: PathBuf,
        #[serde(default = "white")]
        background: [f64; 3],
    },
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Synthetic(SyntheticConfig::default())
    }
}

impl SceneSource {
    /// Builds or loads the dataset. Synthetic scenes draw cameras from `seed`.
    pub fn load(&self, seed: u64) -> Result<SceneDataset> {
        match self {
            SceneSource::Synthetic(cfg) => {
                scenes::make_synthetic_scene(cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7e))
            }
            SceneSource::Blender { path, background } => scenes::load_blender_dataset(path, *background),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikingConfig {
    pub k: f64,
    pub r: f64,
    pub theta_init: f64,
    pub input_rule: InputGradRule,
    /// Whether rendering gradients reach the threshold through the window.
    pub threshold_grad: bool,
}

impl Default for SpikingConfig {
    fn default() -> Self {
        Self {
            k: 1.0,
            r: 1.0,
            theta_init: 0.0,
            input_rule: InputGradRule::Heaviside,
            threshold_grad: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Alternate normal and spiking iterations.
    RoundRobin,
    /// Every iteration is a spiking iteration.
    AllSpiking,
    /// Every iteration is a normal iteration.
    NoSpiking,
}

/// Normal/spiking split of each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundSchedule {
    pub n_normal: u64,
    pub n_spike: u64,
    pub rounds: u64,
    pub mode: ScheduleMode,
    /// Hold the color network fixed during spiking iterations.
    pub freeze_color: bool,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        Self {
            n_normal: 4,
            n_spike: 1,
            rounds: 2000,
            mode: ScheduleMode::RoundRobin,
            freeze_color: true,
        }
    }
}

impl RoundSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_normal == 0 || self.n_spike == 0 {
            return Err(Error::Config {
                key: "schedule".into(),
                message: "n_normal and n_spike must both be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn round_len(&self) -> u64 {
        self.n_normal + self.n_spike
    }

    pub fn total_iterations(&self) -> u64 {
        self.rounds * self.round_len()
    }

    pub fn stage(&self, t: u64) -> Stage {
        match self.mode {
            ScheduleMode::AllSpiking => Stage::Spiking,
            ScheduleMode::NoSpiking => Stage::Normal,
            ScheduleMode::RoundRobin => {
                if t % self.round_len() >= self.n_normal {
                    Stage::Spiking
                } else {
                    Stage::Normal
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_v: f64,
    pub lambda_o: f64,
    pub lambda_eik: f64,
    pub lambda_m: f64,
    pub normal: StageTerms,
    pub spiking: StageTerms,
    /// Rays of each batch whose samples carry the orientation and eikonal
    /// terms.
    pub regularizer_rays: usize,
    /// Uniform scene-box probes added to the eikonal term.
    pub eikonal_points: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_v: w.lambda_v,
            lambda_o: w.lambda_o,
            lambda_eik: w.lambda_eik,
            lambda_m: w.lambda_m,
            normal: StageTerms::default(),
            spiking: StageTerms {
                threshold: true,
                ..StageTerms::default()
            },
            regularizer_rays: 2,
            eikonal_points: 32,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_v: self.lambda_v,
            lambda_o: self.lambda_o,
            lambda_eik: self.lambda_eik,
            lambda_m: self.lambda_m,
        }
    }

    pub fn terms(&self, stage: Stage) -> StageTerms {
        match stage {
            Stage::Normal => self.normal,
            Stage::Spiking => self.spiking,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_hash: f64,
    pub lr_density: f64,
    pub lr_color: f64,
    pub lr_threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_hash: 1e-2,
            lr_density: 1e-3,
            lr_color: 1e-3,
            lr_threshold: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::HashTable => self.lr_hash,
            ParamGroup::Density => self.lr_density,
            ParamGroup::Color => self.lr_color,
            ParamGroup::Threshold => self.lr_threshold,
        }
    }
}

/// Ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    /// Every iteration spiking, color network trainable.
    WoRound,
    /// Color network trainable in spiking iterations.
    WoFix,
    /// No spiking iterations at all.
    Baseline,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Full, Preset::WoRound, Preset::WoFix, Preset::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::WoRound => "wo-round",
            Preset::WoFix => "wo-fix",
            Preset::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config {
                key: "preset".into(),
                message: format!("unknown preset `{s}`"),
            })
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let s = &mut cfg.schedule;
        match self {
            Preset::Full => {
                s.mode = ScheduleMode::RoundRobin;
                s.freeze_color = true;
            }
            Preset::WoRound => {
                // With no normal stage the color network must learn here.
                s.mode = ScheduleMode::AllSpiking;
                s.freeze_color = false;
            }
            Preset::WoFix => {
                s.mode = ScheduleMode::RoundRobin;
                s.freeze_color = false;
            }
            Preset::Baseline => {
                s.mode = ScheduleMode::NoSpiking;
            }
        }
    }
}

/// Full training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scene: SceneSource,
    pub sampler: SamplerConfig,
    /// Rays per iteration.
    pub batch_rays: usize,
    pub network: FieldConfig,
    pub spiking: SpikingConfig,
    pub schedule: RoundSchedule,
    pub losses: LossConfig,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scene: SceneSource::default(),
            sampler: SamplerConfig::default(),
            batch_rays: 64,
            network: FieldConfig::default(),
            spiking: SpikingConfig::default(),
            schedule: RoundSchedule::default(),
            losses: LossConfig::default(),
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Parses JSON; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.batch_rays == 0 {
            return bad("batch_rays", "must be at least 1");
        }
        if self.sampler.n_samples < 2 {
            return bad("sampler.n_samples", "must be at least 2");
        }
        if !(self.spiking.k > 0.0) {
            return bad("spiking.k", "must be positive");
        }
        if !(self.spiking.r > 0.0) {
            return bad("spiking.r", "must be positive");
        }
        if !(self.spiking.theta_init >= 0.0) {
            return bad("spiking.theta_init", "must be >= 0");
        }
        self.schedule.validate()?;
        self.losses.weights().validate()?;
        let o = &self.optimizer;
        for (k, v) in [
            ("optimizer.lr_hash", o.lr_hash),
            ("optimizer.lr_density", o.lr_density),
            ("optimizer.lr_color", o.lr_color),
            ("optimizer.lr_threshold", o.lr_threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be a finite value >= 0");
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer", "betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One Adam update over aligned slices. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam moments aligned with a parameter store, with a step counter per
/// tensor so frozen tensors keep their bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            steps: vec![0; store.entries().len()],
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Updates every tensor for which `lr` returns `Some`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBuffer,
        cfg: &AdamConfig,
        lr: impl Fn(crate::diffcore::ParamId) -> Option<f64>,
    ) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(rate) = lr(id) else { continue };
            let e = store.entry(id).clone();
            let range = e.offset..e.offset + e.len;
            self.steps[id.0] += 1;
            adam_step(
                store.get_mut(id),
                &grads.as_slice()[range.clone()],
                &mut self.m[range.clone()],
                &mut self.v[range],
                self.steps[id.0],
                rate,
                (cfg.beta1, cfg.beta2),
                cfg.eps,
            );
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub field: FieldParams,
    pub adam: Adam,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

/// The trainer: config, dataset and state.
pub struct Trainer {
    config: TrainConfig,
    dataset: SceneDataset,
    state: TrainState,
    last_ops: Vec<&'static str>,
}

fn divergence(iter: u64, stage: Stage, reason: String) -> Error {
    Error::Divergence {
        iteration: iter,
        stage: stage.as_str(),
        reason,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: SceneDataset) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut field = FieldParams::new(config.network.clone(), dataset.bounds, &mut rng)?;
        field.set_threshold(config.spiking.theta_init);
        let adam = Adam::new(field.store());
        Ok(Self {
            config,
            dataset,
            state: TrainState {
                field,
                adam,
                iter: 0,
                rng,
            },
            last_ops: Vec::new(),
        })
    }

    /// Loads the configured scene and builds a trainer.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let ds = config.scene.load(config.seed)?;
        Self::new(config, ds)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &SceneDataset {
        &self.dataset
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn field(&self) -> &FieldParams {
        &self.state.field
    }

    /// Op names recorded by the most recent iteration, in tape order.
    pub fn last_tape_ops(&self) -> &[&'static str] {
        &self.last_ops
    }

    pub fn into_field(self) -> FieldParams {
        self.state.field
    }

    pub fn total_iterations(&self) -> u64 {
        self.config.schedule.total_iterations()
    }

    pub fn is_done(&self) -> bool {
        self.state.iter >= self.total_iterations()
    }

    /// Runs the next scheduled iteration.
    pub fn step(&mut self) -> Result<LossReport> {
        let stage = self.config.schedule.stage(self.state.iter);
        self.run_iteration(stage)
    }

    /// Runs every remaining iteration, appending reports to `log`.
    pub fn run<W: Write>(&mut self, mut log: Option<&mut LossLog<W>>) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity((self.total_iterations() - self.state.iter) as usize);
        while !self.is_done() {
            let r = self.step()?;
            if let Some(l) = log.as_deref_mut() {
                l.append(&r).map_err(|e| Error::io("training log", e))?;
            }
            out.push(r);
        }
        Ok(out)
    }

    /// One optimizer step in the given stage on a fresh ray batch.
    pub fn run_iteration(&mut self, stage: Stage) -> Result<LossReport> {
        let cfg = &self.config;
        let iter = self.state.iter;
        let rays = ray_batch(&self.dataset, cfg.batch_rays, &mut self.state.rng)?;
        let batch = SampleBatch::build(
            &rays.rays,
            self.dataset.views[0].camera.near,
            self.dataset.views[0].camera.far,
            &self.dataset.bounds,
            &cfg.sampler,
            &mut self.state.rng,
        )?;
        let terms = cfg.losses.terms(stage);
        let weights = cfg.losses.weights();
        let spiking = stage == Stage::Spiking;
        let freeze_color = spiking && cfg.schedule.freeze_color;
        let field = &self.state.field;

        let reg_rays = cfg.losses.regularizer_rays.min(batch.n_rays());
        let reg_samples = batch.offsets[reg_rays];
        let need_orient = terms.orientation && weights.lambda_o > 0.0 && reg_samples > 0;
        let need_eik = terms.eikonal && weights.lambda_eik > 0.0;
        let mut probes: Vec<Vec3> = Vec::new();
        if need_orient || need_eik {
            probes.extend_from_slice(&batch.positions[..reg_samples]);
        }
        if need_eik {
            let b = self.dataset.bounds;
            for _ in 0..cfg.losses.eikonal_points {
                probes.push([
                    self.state.rng.gen_range(b.min[0]..b.max[0]),
                    self.state.rng.gen_range(b.min[1]..b.max[1]),
                    self.state.rng.gen_range(b.min[2]..b.max[2]),
                ]);
            }
        }

        let mut tape = Tape::new(field.store());
        if !spiking {
            tape.freeze(field.threshold_id());
        }
        if freeze_color {
            for id in field.group_ids(ParamGroup::Color) {
                tape.freeze(id);
            }
        }

        let mut report = LossReport {
            iter,
            stage,
            color: 0.0,
            threshold: None,
            orientation: None,
            eikonal: None,
            mask: None,
            total: 0.0,
            theta: field.threshold(),
        };

        let mut total;
        let render = if batch.n_samples() > 0 {
            let pos = tape.constant(batch.positions_tensor());
            let (sigma, geo) = field.density_on_tape(&mut tape, pos)?;
            let sigma = if spiking {
                let th = tape.param(field.threshold_id());
                let opts = GateOptions {
                    input_rule: cfg.spiking.input_rule,
                    threshold_grad: cfg.spiking.threshold_grad,
                };
                fif_gate(&mut tape, sigma, th, cfg.spiking.k, cfg.spiking.r, opts)?
            } else {
                sigma
            };
            let sh = tape.constant(field.sh_rows(&batch.sample_dirs())?);
            let colors = field.color_on_tape(&mut tape, sh, geo);
            Some(render_on_tape(&mut tape, &batch, sigma, colors, cfg.sampler.background)?)
        } else {
            None
        };
        let (rgb, opacity) = match render {
            Some(r) => (r.rgb, r.opacity),
            None => {
                let bg: Vec<f64> = (0..batch.n_rays()).flat_map(|_| cfg.sampler.background).collect();
                (
                    tape.constant(Tensor::new(batch.n_rays(), 3, bg)),
                    tape.constant(Tensor::zeros(batch.n_rays(), 1)),
                )
            }
        };
        let target = Tensor::new(rays.colors.len(), 3, rays.colors.iter().flatten().copied().collect());
        let lc = losses::color_loss_on_tape(&mut tape, rgb, &target);
        report.color = tape.scalar(lc).unwrap();
        total = lc;

        if spiking && terms.threshold && weights.lambda_v > 0.0 {
            let th = tape.param(field.threshold_id());
            let lv = losses::threshold_loss_on_tape(&mut tape, th, weights.lambda_v);
            report.threshold = tape.scalar(lv);
            total = tape.add(total, lv);
        }
        if terms.mask && weights.lambda_m > 0.0 {
            if let Some(m) = &rays.masks {
                let lm = losses::mask_loss_on_tape(&mut tape, opacity, m);
                report.mask = tape.scalar(lm);
                let s = tape.scale(lm, weights.lambda_m);
                total = tape.add(total, s);
            }
        }
        if !probes.is_empty() {
            let eps = 0.5 * field.finest_voxel();
            let grads = fd_gradient_on_tape(&mut tape, field, &probes, eps)?;
            if need_orient {
                let w = render.expect("samples present").weights;
                let w = tape.slice_rows(w, 0, reg_samples);
                let g = tape.slice_rows(grads, 0, reg_samples);
                let gv = tape.value(g);
                let valid: Vec<bool> = (0..reg_samples)
                    .map(|i| crate::math::norm([gv.get(i, 0), gv.get(i, 1), gv.get(i, 2)]) > crate::field::DEGENERATE_GRADIENT_NORM)
                    .collect();
                let dirs: Vec<Vec3> = batch.sample_dirs()[..reg_samples].to_vec();
                let lo = losses::orientation_loss_on_tape(&mut tape, w, g, &dirs, &valid, reg_rays);
                report.orientation = tape.scalar(lo);
                let s = tape.scale(lo, weights.lambda_o);
                total = tape.add(total, s);
            }
            if need_eik {
                let le = losses::eikonal_loss_on_tape(&mut tape, grads);
                report.eikonal = tape.scalar(le);
                let s = tape.scale(le, weights.lambda_eik);
                total = tape.add(total, s);
            }
        }

        let value = tape.scalar(total).unwrap();
        let checked = losses::total_loss(&report, &weights)?;
        if !value.is_finite() {
            return Err(divergence(iter, stage, format!("total loss is {value}")));
        }
        report.total = checked;
        let grads = tape.backward(total)?;
        if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(divergence(iter, stage, format!("non-finite gradient at parameter slot {i}")));
        }
        self.last_ops = tape.op_names();
        drop(tape);

        let field = &mut self.state.field;
        let groups: Vec<ParamGroup> = field.store().ids().map(|id| field.group(id)).collect();
        let opt = &self.config.optimizer;
        self.state.adam.step(field.store_mut(), &grads, opt, |id| {
            let g = groups[id.0];
            let frozen = (g == ParamGroup::Threshold && !spiking) || (g == ParamGroup::Color && freeze_color);
            (!frozen).then(|| opt.lr(g))
        });
        let th = field.threshold().max(0.0);
        field.set_threshold(th);
        if !field.store().values().iter().all(|v| v.is_finite()) {
            return Err(divergence(iter, stage, "non-finite parameter after update".into()));
        }
        self.state.iter += 1;
        Ok(report)
    }
}

/// Result of a complete training run.
pub struct TrainOutput {
    pub field: FieldParams,
    pub reports: Vec<LossReport>,
}

/// Trains from scratch on `dataset`, appending to `log` when given.
pub fn train<W: Write>(config: TrainConfig, dataset: SceneDataset, log: Option<&mut LossLog<W>>) -> Result<TrainOutput> {
    let mut t = Trainer::new(config, dataset)?;
    let reports = t.run(log)?;
    Ok(TrainOutput {
        field: t.into_field(),
        reports,
    })
}

/// Checkpoint bytes of the initial field for a config, without training.
pub fn initial_checkpoint(config: &TrainConfig, dataset: &SceneDataset) -> Result<Vec<u8>> {
    let t = Trainer::new(config.clone(), dataset.clone())?;
    Ok(checkpoint::to_bytes(t.field()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::HashGridConfig;
    use crate::scenes::make_synthetic_scene;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            scene: SceneSource::Synthetic(SyntheticConfig {
                n_train: 4,
                n_eval: 0,
                width: 12,
                height: 12,
                focal: 15.0,
                reference_samples: 64,
                ..Default::default()
            }),
            sampler: SamplerConfig {
                n_samples: 8,
                ..Default::default()
            },
            batch_rays: 16,
            network: FieldConfig {
                hash: HashGridConfig {
                    levels: 2,
                    log2_table_size: 8,
                    features: 2,
                    base_resolution: 4,
                    max_resolution: 8,
                },
                density_hidden: 6,
                density_layers: 1,
                geo_features: 3,
                color_hidden: 6,
                color_layers: 1,
                sh_degree: 2,
            },
            schedule: RoundSchedule {
                rounds: 3,
                ..Default::default()
            },
            losses: LossConfig {
                regularizer_rays: 2,
                eikonal_points: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn trainer() -> Trainer {
        Trainer::from_config(tiny_config()).unwrap()
    }

    #[test]
    fn stage_alternation() {
        let s = RoundSchedule::default();
        let stages: Vec<_> = (0..10).map(|t| s.stage(t)).collect();
        use Stage::*;
        assert_eq!(stages, vec![Normal, Normal, Normal, Normal, Spiking, Normal, Normal, Normal, Normal, Spiking]);
        assert_eq!(s.total_iterations(), 10_000);
        let all = RoundSchedule {
            mode: ScheduleMode::AllSpiking,
            ..s
        };
        assert!((0..10).all(|t| all.stage(t) == Spiking));
    }

    #[test]
    fn adam_examples() {
        let mut p = [0.5];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_step(&mut p, &[0.0], &mut m, &mut v, 1, 0.01, (0.9, 0.999), 1e-15);
        assert_eq!(p, [0.5]);
        let mut p = [0.0];
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, 0.01, (0.9, 0.999), 1e-15);
        assert!((p[0] + 0.01).abs() < 1e-12);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 2, 0.01, (0.9, 0.999), 1e-15);
        assert!((p[0] + 0.02).abs() < 1e-12);
    }

    #[test]
    fn adam_skips_frozen_slots() {
        let mut store = ParamStore::new();
        let a = store.add("a", &[2], vec![1.0, 2.0]);
        let b = store.add("b", &[1], vec![3.0]);
        let mut grads = GradBuffer::zeros(store.len());
        grads.as_mut_slice().copy_from_slice(&[1.0, 1.0, 5.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, &AdamConfig::default(), |id| (id == a).then_some(0.1));
        assert_eq!(store.get(b), &[3.0]);
        assert_eq!(adam.moments().0[2], 0.0);
        assert_eq!(adam.moments().1[2], 0.0);
        assert!(store.get(a)[0] < 1.0);
    }

    #[test]
    fn zero_threshold_spiking_matches_normal_forward() {
        let a = {
            let mut t = trainer();
            t.run_iteration(Stage::Normal).unwrap()
        };
        let b = {
            let mut t = trainer();
            t.run_iteration(Stage::Spiking).unwrap()
        };
        assert_eq!(a.color, b.color);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn spiking_freezes_color_and_normal_freezes_threshold() {
        let mut t = trainer();
        let color_ids = t.field().group_ids(ParamGroup::Color);
        let before: Vec<Vec<f64>> = color_ids.iter().map(|&id| t.field().store().get(id).to_vec()).collect();
        t.run_iteration(Stage::Spiking).unwrap();
        let after: Vec<Vec<f64>> = color_ids.iter().map(|&id| t.field().store().get(id).to_vec()).collect();
        assert_eq!(before, after);
        let th = t.field().threshold();
        t.run_iteration(Stage::Normal).unwrap();
        assert_eq!(t.field().threshold(), th);
    }

    #[test]
    fn threshold_rises_under_threshold_loss_alone() {
        let mut t = trainer();
        // densities near ln 2 with a threshold far above them sit outside the window
        t.state_mut().field.set_threshold(3.0);
        let th = t.field().threshold();
        t.run_iteration(Stage::Spiking).unwrap();
        assert!(t.field().threshold() > th);
    }

    #[test]
    fn zero_rounds_keeps_initialization() {
        let cfg = TrainConfig {
            schedule: RoundSchedule {
                rounds: 0,
                ..Default::default()
            },
            ..tiny_config()
        };
        let ds = cfg.scene.load(cfg.seed).unwrap();
        let init = initial_checkpoint(&cfg, &ds).unwrap();
        let out = train::<Vec<u8>>(cfg, ds, None).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(checkpoint::to_bytes(&out.field), init);
    }

    #[test]
    fn same_seed_same_log() {
        let run = || {
            let cfg = tiny_config();
            let ds = cfg.scene.load(cfg.seed).unwrap();
            let mut log = LossLog::new(Vec::new());
            let out = train(cfg, ds, Some(&mut log)).unwrap();
            (log.into_inner(), checkpoint::to_bytes(&out.field))
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 15);
    }

    #[test]
    fn config_errors_name_the_key() {
        let e = TrainConfig::from_json(r#"{"schedule": {"n_normal": "four"}}"#).unwrap_err();
        match e {
            Error::Config { key, .. } => assert_eq!(key, "schedule.n_normal"),
            other => panic!("{other:?}"),
        }
        let e = TrainConfig::from_json(r#"{"losses": {"lambda_q": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("losses"), "{e}");
        let e = TrainConfig::from_json(r#"{"spiking": {"k": -1}}"#).unwrap_err();
        assert!(e.to_string().contains("spiking.k"), "{e}");
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn presets_configure_schedule() {
        let mut c = TrainConfig::default();
        Preset::WoRound.apply(&mut c);
        assert!(c.schedule.mode == ScheduleMode::AllSpiking && !c.schedule.freeze_color);
        Preset::WoFix.apply(&mut c);
        assert!(!c.schedule.freeze_color && c.schedule.mode == ScheduleMode::RoundRobin);
        Preset::Baseline.apply(&mut c);
        assert_eq!(c.schedule.mode, ScheduleMode::NoSpiking);
        assert_eq!(Preset::parse("wo-fix").unwrap(), Preset::WoFix);
        assert!(Preset::parse("nope").is_err());
    }

    #[test]
    fn dataset_is_reproducible() {
        let c = tiny_config();
        let a = c.scene.load(4).unwrap();
        let b = make_synthetic_scene(
            match &c.scene {
                SceneSource::Synthetic(s) => s,
                _ => unreachable!(),
            },
            &mut ChaCha8Rng::seed_from_u64(4 ^ 0x5ce7e),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
