//! Two-stage optimization loop, checkpoints and loss logs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::field::{init_spheres, Field, FieldConfig, ParamGroup, SphereFit};
use crate::graph::{decompose_prompts, parse_graph, EdgePromptStyle, EdgeSchedule, PromptSet, SceneGraph, StepKind};
use crate::guidance::{CfgSchedule, GuidanceError, GuidanceImage, GuidanceProvider, GuidanceRequest, Stage};
use crate::losses::{required_renders, total_loss, Coefficients, GuidedRender};
use crate::optim::{Adam, AdamConfig};
use crate::render::{
    composite, evaluate, render_batch, render_images, sample_rays, Camera, CameraDistribution, IdentityMode, Image, RenderSettings, RenderTag,
    Stratification, RENDER_CHUNK,
};
use crate::space::SceneSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps_coarse: u64,
    pub steps_fine: u64,
    pub res_coarse: usize,
    pub res_fine: usize,
    /// Hash tables.
    pub lr_table: f64,
    /// Decoders and κ.
    pub lr_decoder: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub coefficients: Coefficients,
    pub cfg: CfgSchedule,
    pub camera: CameraDistribution,
    pub noise_range: (f64, f64),
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    pub edge_prompts: EdgePromptStyle,
    /// Attempts after the first failed guidance request of a step.
    pub max_retries: u32,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Rays per tape; larger images are rendered chunk by chunk.
    pub chunk_rays: usize,
    pub field: FieldConfig,
    pub init: SphereFit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_coarse: 10_000,
            steps_fine: 10_000,
            res_coarse: 64,
            res_fine: 256,
            lr_table: 1e-2,
            lr_decoder: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            coefficients: Coefficients::default(),
            cfg: CfgSchedule::default(),
            camera: CameraDistribution::default(),
            noise_range: (0.02, 0.98),
            samples_per_ray: 64,
            background: [1.0; 3],
            edge_prompts: EdgePromptStyle::Full,
            max_retries: 3,
            checkpoint_every: 0,
            chunk_rays: RENDER_CHUNK,
            field: FieldConfig::default(),
            init: SphereFit::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("guidance failed at step {step} after {attempts} attempts: {error}")]
    Guidance { step: u64, attempts: u32, error: GuidanceError },
    #[error("non-finite loss or gradient at step {0}")]
    NonFinite(u64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainConfig {
    /// 500 + 500 steps at 32 / 64 px with lighter ray sampling. A 64 px view
    /// fits one gradient tape, which costs about 1 GB of peak memory.
    pub fn desk() -> Self {
        Self {
            steps_coarse: 500,
            steps_fine: 500,
            res_coarse: 32,
            res_fine: 64,
            samples_per_ray: 32,
            chunk_rays: 4096,
            ..Self::default()
        }
    }

    /// Reads TOML or JSON, chosen by extension (`.json` is JSON).
    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)?;
        let config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps_coarse == 0 || self.steps_fine == 0 {
            return bad("stage step counts must be positive".into());
        }
        if self.res_coarse < 16 || self.res_fine < 16 {
            return bad("resolutions must be at least 16".into());
        }
        if self.samples_per_ray < 2 {
            return bad("at least two samples per ray".into());
        }
        if self.chunk_rays == 0 {
            return bad("chunk_rays must be positive".into());
        }
        let (lo, hi) = self.noise_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("noise range ({lo}, {hi}) must satisfy 0 < t_min <= t_max < 1"));
        }
        if !(self.lr_table >= 0.0 && self.lr_decoder >= 0.0) {
            return bad("learning rates must be nonnegative".into());
        }
        let c = &self.coefficients;
        if !(c.sds >= 0.0 && c.penetration >= 0.0 && c.eikonal >= 0.0) {
            return bad("loss coefficients must be nonnegative".into());
        }
        if !(self.camera.fov_y_deg > 0.0 && self.camera.fov_y_deg < 120.0) {
            return bad("camera field of view must lie in (0, 120) degrees".into());
        }
        if self.camera.elevation.0 > self.camera.elevation.1 || self.camera.azimuth.0 > self.camera.azimuth.1 {
            return bad("camera ranges must be ordered".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_coarse + self.steps_fine
    }

    pub fn stage(&self, step: u64) -> Stage {
        if step < self.steps_coarse {
            Stage::Coarse
        } else {
            Stage::Fine
        }
    }

    pub fn resolution(&self, stage: Stage) -> usize {
        match stage {
            Stage::Coarse => self.res_coarse,
            Stage::Fine => self.res_fine,
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            samples_per_ray: self.samples_per_ray,
            background: self.background,
        }
    }

    fn learning_rates(&self, groups: &[ParamGroup]) -> Vec<f64> {
        groups
            .iter()
            .map(|g| match g {
                ParamGroup::Table(_) => self.lr_table,
                ParamGroup::Decoder | ParamGroup::Kappa => self.lr_decoder,
            })
            .collect()
    }
}

/// Everything needed to continue a run. Per-step randomness is derived from
/// `(seed, step)`, so the step counter is the whole RNG state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub field: Field<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub schedule: EdgeSchedule,
}

impl TrainState {
    pub fn checksum(&self) -> u64 {
        param_checksum(&self.field)
    }
}

/// FNV-1a over the little-endian bytes of every parameter.
pub fn param_checksum(field: &Field<f32>) -> u64 {
    let mut h = Fnv::new();
    for t in field.params.tensors() {
        t.data().iter().for_each(|v| h.write(&v.to_le_bytes()));
    }
    h.finish()
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// One row of `losses.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub kind: String,
    pub sds_count: usize,
    pub penetration: f64,
    pub eikonal: f64,
    /// `β₁·Σ ½‖r‖² + β₂·penetration + β₃·eikonal` over the step's residuals `r`.
    pub total: f64,
}

const CSV_HEADER: &str = "step,kind,sds_count,penet,eikonal,total";

impl LossRow {
    fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.kind, self.sds_count, self.penetration, self.eikonal, self.total)
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            kind: f[1].to_string(),
            sds_count: f[2].parse().ok()?,
            penetration: f[3].parse().ok()?,
            eikonal: f[4].parse().ok()?,
            total: f[5].parse().ok()?,
        })
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub row: LossRow,
    pub stage: Stage,
    pub camera: Camera,
    /// The guided renders in injection order.
    pub renders: Vec<GuidedRender>,
    /// Failed guidance attempts before the step went through.
    pub retries: u32,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub fn kind_label(kind: &StepKind) -> String {
    match kind {
        StepKind::ObjectAndEdge { object, edge: Some(k) } => format!("object{object}+edge{k}"),
        StepKind::ObjectAndEdge { object, edge: None } => format!("object{object}"),
        StepKind::Global => "global".into(),
    }
}

fn guide_with_retries(
    provider: &mut dyn GuidanceProvider,
    request: &GuidanceRequest,
    max_retries: u32,
    retries: &mut u32,
) -> Result<GuidanceImage, TrainError> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let result = provider.guide(request).and_then(|r| {
            if r.residual.shape() != request.image.shape() {
                Err(GuidanceError::ShapeMismatch {
                    expected: request.image.shape(),
                    found: r.residual.shape(),
                })
            } else if !r.residual.is_finite() {
                Err(GuidanceError::Protocol("non-finite residual".into()))
            } else {
                Ok(r.residual)
            }
        });
        match result {
            Ok(r) => return Ok(r),
            Err(error) if attempts > max_retries => {
                return Err(TrainError::Guidance {
                    step: request.step,
                    attempts,
                    error,
                })
            }
            Err(_) => *retries += 1,
        }
    }
}

/// One step: sample a camera, render what the plan needs, query guidance,
/// assemble the objective and apply one Adam update. On error the state is
/// left untouched.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    graph: &SceneGraph,
    prompts: &PromptSet,
    provider: &mut dyn GuidanceProvider,
) -> Result<StepRecord, TrainError> {
    let step = state.step;
    let stage = config.stage(step);
    let res = config.resolution(stage);
    let mut rng = step_rng(config.seed, step);
    let camera = config.camera.sample(&mut rng, res, res);
    let jitter: u64 = rng.random();
    let mut schedule = state.schedule.clone();
    let plan = schedule.next(graph, step);
    let renders = required_renders(graph, prompts, &plan);
    let tags: Vec<RenderTag> = renders.iter().map(|r| r.tag).collect();
    let bounds = state.field.config().bounds;
    let rays = sample_rays::<f32>(&camera, &bounds, config.samples_per_ray, Stratification::Jittered { seed: jitter });
    let total_points = rays.num_rays() * rays.samples_per_ray;
    let cfg_weight = config.cfg.weight(stage, graph.num_objects());
    let mut retries = 0;
    let chunks = rays.split(config.chunk_rays);

    let request = |k: usize, image: &Image| GuidanceRequest {
        id: step * 16 + k as u64,
        image: GuidanceImage::from_image(image),
        prompt: renders[k].prompt.clone(),
        step,
        stage,
        cfg_weight,
        noise_range: config.noise_range,
        camera: Some(camera),
    };
    let to_tensor = |g: GuidanceImage| Tensor::from_vec(g.height * g.width, 3, g.data);

    let shapes = state.field.params.shapes();
    let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
    let (mut pen, mut eik) = (0.0, 0.0);
    let mut residuals: Vec<Tensor<f32>> = Vec::new();

    let mut accumulate = |tape: &mut Tape<f32>,
                          vars: &[crate::autodiff::Var],
                          samples: &crate::render::RaySamples<f32>,
                          images: &[crate::render::RenderedImage],
                          residuals: &[Tensor<f32>]|
     -> Result<(), TrainError> {
        let (Some(sdf), Some(lambda)) = (samples.sdf, samples.identity) else {
            return Ok(());
        };
        let pairs: Vec<_> = images.iter().zip(residuals).collect();
        let (loss, p, e) = total_loss(tape, &renders, &pairs, sdf, lambda, &samples.gradients, total_points, &config.coefficients)
            .map_err(|e| TrainError::Scene(e.to_string()))?;
        pen += p;
        eik += e;
        let g = tape.backward(loss).map_err(|e| TrainError::Scene(e.to_string()))?;
        for (acc, &v) in grads.iter_mut().zip(vars) {
            if let Some(t) = g.get(v) {
                acc.add_assign(t);
            }
        }
        Ok(())
    };

    if chunks.len() == 1 {
        let mut tape = Tape::new();
        let bound = state.field.bind(&mut tape);
        let samples = evaluate(&mut tape, &bound, rays.clone(), config.background, &IdentityMode::StraightThrough, true);
        let images: Vec<_> = tags.iter().map(|&t| composite(&mut tape, &samples, t)).collect();
        for (k, img) in images.iter().enumerate() {
            let r = guide_with_retries(provider, &request(k, &img.image(&tape)), config.max_retries, &mut retries)?;
            residuals.push(to_tensor(r));
        }
        accumulate(&mut tape, bound.vars(), &samples, &images, &residuals)?;
    } else {
        let images = render_batch(&state.field, &rays, config.background, &tags);
        for (k, img) in images.iter().enumerate() {
            let r = guide_with_retries(provider, &request(k, img), config.max_retries, &mut retries)?;
            residuals.push(to_tensor(r));
        }
        for chunk in chunks {
            let mut tape = Tape::new();
            let bound = state.field.bind(&mut tape);
            let samples = evaluate(&mut tape, &bound, chunk, config.background, &IdentityMode::StraightThrough, true);
            let images: Vec<_> = tags.iter().map(|&t| composite(&mut tape, &samples, t)).collect();
            accumulate(&mut tape, bound.vars(), &samples, &images, &residuals)?;
        }
    }

    let c = &config.coefficients;
    let sds_half_sq: f64 = residuals.iter().map(|r| 0.5 * r.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum();
    let total = c.sds * sds_half_sq + c.penetration * pen + c.eikonal * eik;
    if !total.is_finite() || !grads.iter().all(|g| g.is_finite()) {
        return Err(TrainError::NonFinite(step));
    }

    if step == config.steps_coarse {
        state.adam.reset();
    }
    let lrs = config.learning_rates(&state.field.params.groups());
    state.adam.update(&mut state.field.params.tensors_mut(), &grads, &lrs);
    state.schedule = schedule;
    state.step += 1;
    Ok(StepRecord {
        row: LossRow {
            step,
            kind: kind_label(&plan.kind),
            sds_count: renders.len(),
            penetration: pen,
            eikonal: eik,
            total,
        },
        stage,
        camera,
        renders,
        retries,
    })
}

/// A run in progress: config, graph, state and the loss log so far.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub graph: SceneGraph,
    pub prompts: PromptSet,
    pub state: TrainState,
    pub log: Vec<LossRow>,
}

impl Trainer {
    /// Validates the inputs and initializes every object to its layout sphere.
    pub fn new(config: TrainConfig, graph: SceneGraph) -> Result<Self, TrainError> {
        config.validate()?;
        let space = SceneSpace::layout(&graph, config.field.bounds).map_err(|e| TrainError::Scene(e.to_string()))?;
        let field = init_spheres::<f32>(&space, config.field, &config.init, config.seed);
        Ok(Self::with_field(config, graph, field))
    }

    /// Starts from given parameters instead of the sphere initialization.
    pub fn with_field(config: TrainConfig, graph: SceneGraph, field: Field<f32>) -> Self {
        assert_eq!(field.num_objects(), graph.num_objects(), "one field per node");
        let prompts = decompose_prompts(&graph, config.edge_prompts);
        let adam = Adam::new(config.adam, &field.params.shapes());
        let schedule = EdgeSchedule::new(&graph);
        Self {
            config,
            graph,
            prompts,
            state: TrainState {
                field,
                adam,
                step: 0,
                schedule,
            },
            log: Vec::new(),
        }
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.config.total_steps()
    }

    pub fn step(&mut self, provider: &mut dyn GuidanceProvider) -> Result<StepRecord, TrainError> {
        let rec = train_step(&mut self.state, &self.config, &self.graph, &self.prompts, provider)?;
        self.log.push(rec.row.clone());
        Ok(rec)
    }

    /// Steps until `until` (or the end of the run), checkpointing into `dir`
    /// every `checkpoint_every` steps and at the end. On failure the last
    /// good state is checkpointed before the error is returned.
    pub fn run(
        &mut self,
        provider: &mut dyn GuidanceProvider,
        dir: Option<&Path>,
        until: Option<u64>,
        mut progress: impl FnMut(&StepRecord),
    ) -> Result<(), TrainError> {
        let end = until.unwrap_or(u64::MAX).min(self.config.total_steps());
        while self.state.step < end {
            match self.step(provider) {
                Ok(rec) => progress(&rec),
                Err(e) => {
                    if let Some(d) = dir {
                        self.save(d)?;
                    }
                    return Err(e);
                }
            }
            let every = self.config.checkpoint_every;
            if let Some(d) = dir {
                if every > 0 && self.state.step % every == 0 && self.state.step < end {
                    self.save(d)?;
                }
            }
        }
        if let Some(d) = dir {
            self.save(d)?;
        }
        Ok(())
    }

    /// Renders the current fields from `camera` without gradients.
    pub fn render(&self, camera: &Camera, tags: &[RenderTag]) -> Vec<Image> {
        render_images(&self.state.field, camera, &self.state.field.config().bounds, &self.config.render_settings(), tags)
    }

    /// Writes `config.json`, `graph.json`, `params.bin`, `state.bin` and
    /// `losses.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        let config = serde_json::to_string_pretty(&self.config).expect("config serializes");
        write_atomic(&dir.join("config.json"), config.as_bytes())?;
        let graph = serde_json::to_string_pretty(&self.graph.to_json()).expect("graph serializes");
        write_atomic(&dir.join("graph.json"), graph.as_bytes())?;
        write_atomic(&dir.join("params.bin"), &encode_params(&self.state.field))?;
        write_atomic(&dir.join("state.bin"), &encode_state(&self.state))?;
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for row in &self.log {
            csv.push_str(&row.csv());
            csv.push('\n');
        }
        write_atomic(&dir.join("losses.csv"), csv.as_bytes())?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let ck = |m: String| TrainError::Checkpoint(m);
        let config: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?).map_err(|e| ck(format!("config.json: {e}")))?;
        config.validate()?;
        let graph = parse_graph(&fs::read_to_string(dir.join("graph.json"))?).map_err(|e| ck(format!("graph.json: {e}")))?;
        let params = decode_tensors(&fs::read(dir.join("params.bin"))?, PARAMS_MAGIC).map_err(|e| ck(format!("params.bin: {e}")))?;
        let mut field = Field::<f32>::new(config.field, graph.num_objects(), 0.5, 0);
        let mut trainer = Self::with_field(config.clone(), graph, field.clone());
        assign_all(field.params.tensors_mut(), params).map_err(|e| ck(format!("params.bin: {e}")))?;
        let (step, adam_step, counters, moments) = decode_state(&fs::read(dir.join("state.bin"))?).map_err(|e| ck(format!("state.bin: {e}")))?;
        if counters.len() != trainer.graph.num_objects() {
            return Err(ck("state.bin: schedule does not match the graph".into()));
        }
        let mut adam = Adam::new(config.adam, &field.params.shapes());
        adam.step = adam_step;
        let half = moments.len() / 2;
        let mut it = moments.into_iter();
        let m: Vec<_> = it.by_ref().take(half).collect();
        let v: Vec<_> = it.collect();
        assign_all(adam.m.iter_mut().collect(), m).map_err(|e| ck(format!("state.bin: {e}")))?;
        assign_all(adam.v.iter_mut().collect(), v).map_err(|e| ck(format!("state.bin: {e}")))?;
        let mut log = Vec::new();
        for (i, line) in fs::read_to_string(dir.join("losses.csv"))?.lines().enumerate().skip(1) {
            log.push(LossRow::parse(line).ok_or_else(|| ck(format!("losses.csv line {}", i + 1)))?);
        }
        log.truncate(step as usize);
        trainer.state = TrainState {
            field,
            adam,
            step,
            schedule: EdgeSchedule::from_counters(counters),
        };
        trainer.log = log;
        Ok(trainer)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

const PARAMS_MAGIC: &[u8; 4] = b"SGFP";
const STATE_MAGIC: &[u8; 4] = b"SGFS";

fn put_tensors(buf: &mut Vec<u8>, tensors: &[&Tensor<f32>]) {
    buf.extend((tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend((t.rows() as u32).to_le_bytes());
        buf.extend((t.cols() as u32).to_le_bytes());
        t.data().iter().for_each(|v| buf.extend(v.to_le_bytes()));
    }
}

fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let mut h = Fnv::new();
    h.write(&buf);
    buf.extend(h.finish().to_le_bytes());
    buf
}

fn encode_params(field: &Field<f32>) -> Vec<u8> {
    let mut buf = PARAMS_MAGIC.to_vec();
    put_tensors(&mut buf, &field.params.tensors());
    seal(buf)
}

fn encode_state(state: &TrainState) -> Vec<u8> {
    let mut buf = STATE_MAGIC.to_vec();
    buf.extend(state.step.to_le_bytes());
    buf.extend(state.adam.step.to_le_bytes());
    let c = state.schedule.counters();
    buf.extend((c.len() as u32).to_le_bytes());
    c.iter().for_each(|v| buf.extend(v.to_le_bytes()));
    let moments: Vec<&Tensor<f32>> = state.adam.m.iter().chain(&state.adam.v).collect();
    put_tensors(&mut buf, &moments);
    seal(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let s = self.bytes.get(self.at..self.at + n).ok_or("truncated")?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor<f32>>, String> {
        let n = self.u32()? as usize;
        (0..n)
            .map(|_| {
                let (r, c) = (self.u32()? as usize, self.u32()? as usize);
                let raw = self.take(4 * r * c)?;
                Ok(Tensor::from_vec(r, c, raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()))
            })
            .collect()
    }
}

fn unseal<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>, String> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err("bad header".into());
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    let mut h = Fnv::new();
    h.write(body);
    if h.finish().to_le_bytes() != sum {
        return Err("checksum mismatch".into());
    }
    Ok(Reader { bytes: body, at: 4 })
}

fn decode_tensors(bytes: &[u8], magic: &[u8; 4]) -> Result<Vec<Tensor<f32>>, String> {
    let mut r = unseal(bytes, magic)?;
    r.tensors()
}

type DecodedState = (u64, u64, Vec<u64>, Vec<Tensor<f32>>);

fn decode_state(bytes: &[u8]) -> Result<DecodedState, String> {
    let mut r = unseal(bytes, STATE_MAGIC)?;
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let n = r.u32()? as usize;
    let counters = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    Ok((step, adam_step, counters, r.tensors()?))
}

fn assign_all(targets: Vec<&mut Tensor<f32>>, values: Vec<Tensor<f32>>) -> Result<(), String> {
    if targets.len() != values.len() {
        return Err(format!("{} tensors, expected {}", values.len(), targets.len()));
    }
    for (t, v) in targets.into_iter().zip(values) {
        if t.shape() != v.shape() {
            return Err(format!("tensor shape {:?}, expected {:?}", v.shape(), t.shape()));
        }
        *t = v;
    }
    Ok(())
}
