//! Guidance providers: the source of the per-pixel residual `w(t)(ε̂ − ε)`
//! injected into rendered images. Two analytic mocks and an HTTP client.

use std::collections::HashMap;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::field::AnalyticScene;
use crate::graph::PromptSet;
use crate::render::{render_images, Camera, Image, RenderSettings, RenderTag};
use crate::space::Aabb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

/// Classifier-free guidance weight by stage and object count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfgSchedule {
    pub coarse_two: f64,
    pub coarse_many: f64,
    pub fine: f64,
    pub single: f64,
}

impl Default for CfgSchedule {
    fn default() -> Self {
        Self {
            coarse_two: 50.0,
            coarse_many: 100.0,
            fine: 50.0,
            single: 50.0,
        }
    }
}

impl CfgSchedule {
    pub fn weight(&self, stage: Stage, objects: usize) -> f64 {
        match (stage, objects) {
            (_, 0 | 1) => self.single,
            (Stage::Fine, _) => self.fine,
            (Stage::Coarse, 2) => self.coarse_two,
            (Stage::Coarse, _) => self.coarse_many,
        }
    }
}

/// `H × W × 3` row-major colors.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GuidanceImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image data does not match {height}x{width}x3");
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width * 3])
    }

    pub fn from_image(image: &Image) -> Self {
        Self::new(image.height, image.width, image.rgb.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, 3]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceRequest {
    pub id: u64,
    pub image: GuidanceImage,
    pub prompt: String,
    pub step: u64,
    pub stage: Stage,
    pub cfg_weight: f64,
    pub noise_range: (f64, f64),
    /// Camera of the render. Local mocks use it for view-dependent targets;
    /// it is not part of the wire format.
    pub camera: Option<Camera>,
}

impl GuidanceRequest {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: &str| Err(GuidanceError::InvalidRequest(m.to_string()));
        if self.image.data.len() != self.image.height * self.image.width * 3 {
            return bad("image data does not match its shape");
        }
        if !self.image.is_finite() {
            return bad("image has non-finite values");
        }
        if !(self.cfg_weight > 0.0) {
            return bad("cfg weight must be positive");
        }
        let (lo, hi) = self.noise_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad("noise range must satisfy 0 < t_min <= t_max < 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResponse {
    /// Already multiplied by `weight_applied`.
    pub residual: GuidanceImage,
    pub weight_applied: f64,
    pub t_used: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GuidanceError {
    #[error("invalid guidance request: {0}")]
    InvalidRequest(String),
    #[error("no target for prompt {0:?}")]
    UnknownPrompt(String),
    #[error("residual shape {found:?} does not match image shape {expected:?}")]
    ShapeMismatch { expected: [usize; 3], found: [usize; 3] },
    #[error("guidance request timed out")]
    Timeout,
    #[error("guidance protocol violation: {0}")]
    Protocol(String),
    #[error("guidance provider unavailable: {0}")]
    Unavailable(String),
}

impl GuidanceError {
    /// Whether a retry of the same request may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::Timeout | Self::Unavailable(_) | Self::Protocol(_))
    }
}

/// Supplies residuals for rendered images. Calls are sequential.
pub trait GuidanceProvider {
    fn guide(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError>;
}

impl<P: GuidanceProvider + ?Sized> GuidanceProvider for Box<P> {
    fn guide(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        (**self).guide(request)
    }
}

fn check_shape(expected: [usize; 3], found: [usize; 3]) -> Result<(), GuidanceError> {
    if expected == found {
        Ok(())
    } else {
        Err(GuidanceError::ShapeMismatch { expected, found })
    }
}

/// What a prompt should look like.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// The same image from every view.
    Fixed(GuidanceImage),
    /// A composite of a reference scene rendered from the request camera.
    Reference { scene: AnalyticScene, tag: RenderTag },
}

/// Residual `image − target(prompt)` with `w = 1`.
#[derive(Debug, Clone)]
pub struct PhotometricProvider {
    targets: HashMap<String, Target>,
    bounds: Aabb,
    settings: RenderSettings,
}

impl PhotometricProvider {
    pub fn new(bounds: Aabb, settings: RenderSettings) -> Self {
        Self {
            targets: HashMap::new(),
            bounds,
            settings,
        }
    }

    pub fn with_target(mut self, prompt: impl Into<String>, target: Target) -> Self {
        self.targets.insert(prompt.into(), target);
        self
    }

    /// Targets for every prompt of `prompts`: each object, edge and global
    /// prompt maps to the matching composite of `scene`.
    pub fn for_reference(prompts: &PromptSet, scene: &AnalyticScene, bounds: Aabb, settings: RenderSettings) -> Self {
        let mut p = Self::new(bounds, settings);
        let target = |tag| Target::Reference { scene: scene.clone(), tag };
        p.insert(prompts.global.clone(), target(RenderTag::Scene));
        for (i, o) in prompts.objects.iter().enumerate() {
            p.insert(o.clone(), target(RenderTag::Object { object: i }));
        }
        for e in &prompts.edges {
            p.insert(e.prompt.clone(), target(RenderTag::edge(e.subject, e.object)));
        }
        p
    }

    pub fn insert(&mut self, prompt: impl Into<String>, target: Target) {
        self.targets.insert(prompt.into(), target);
    }

    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.targets.keys().map(String::as_str)
    }

    /// The target for `request`, at the request's resolution.
    pub fn target(&self, request: &GuidanceRequest) -> Result<GuidanceImage, GuidanceError> {
        let target = self
            .targets
            .get(&request.prompt)
            .ok_or_else(|| GuidanceError::UnknownPrompt(request.prompt.clone()))?;
        match target {
            Target::Fixed(img) => {
                check_shape(request.image.shape(), img.shape())?;
                Ok(img.clone())
            }
            Target::Reference { scene, tag } => {
                let camera = request
                    .camera
                    .ok_or_else(|| GuidanceError::InvalidRequest("reference targets need the request camera".into()))?
                    .with_resolution(request.image.width, request.image.height);
                let img = render_images::<f64>(scene, &camera, &self.bounds, &self.settings, &[*tag]);
                Ok(GuidanceImage::from_image(&img[0]))
            }
        }
    }
}

impl GuidanceProvider for PhotometricProvider {
    fn guide(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        request.validate()?;
        let target = self.target(request)?;
        let data = request.image.data.iter().zip(&target.data).map(|(a, b)| a - b).collect();
        Ok(GuidanceResponse {
            residual: GuidanceImage::new(request.image.height, request.image.width, data),
            weight_applied: 1.0,
            t_used: 0.5 * (request.noise_range.0 + request.noise_range.1),
        })
    }
}

/// Photometric residual plus zero-mean score noise:
/// `w(t)·[(image − target) + σ(t)·ξ]` with `σ(t) = sigma · t`, `w = 1`,
/// `t ~ U(noise_range)` and `ξ ~ N(0, I)`. The draw depends only on the seed
/// and the request id, so a retried or resumed step sees the same noise.
#[derive(Debug, Clone)]
pub struct NoisyScoreProvider {
    inner: PhotometricProvider,
    seed: u64,
    sigma: f64,
}

impl NoisyScoreProvider {
    pub fn new(inner: PhotometricProvider, seed: u64, sigma: f64) -> Self {
        assert!(sigma >= 0.0 && sigma.is_finite());
        Self { inner, seed, sigma }
    }

    fn rng(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

impl GuidanceProvider for NoisyScoreProvider {
    fn guide(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        let mut out = self.inner.guide(request)?;
        let mut rng = self.rng(request.id);
        let (lo, hi) = request.noise_range;
        let t = lo + (hi - lo) * rng.random::<f64>();
        let s = self.sigma * t;
        if s > 0.0 {
            for v in &mut out.residual.data {
                let xi: f64 = rng.sample(StandardNormal);
                *v += (s * xi) as f32;
            }
        }
        out.t_used = t;
        Ok(out)
    }
}

/// Zero residual for every request.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroProvider;

impl GuidanceProvider for ZeroProvider {
    fn guide(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        request.validate()?;
        Ok(GuidanceResponse {
            residual: GuidanceImage::zeros(request.image.height, request.image.width),
            weight_applied: 1.0,
            t_used: request.noise_range.0,
        })
    }
}

/// Another provider's residual times a constant.
#[derive(Debug, Clone)]
pub struct ScaledProvider<P> {
    pub inner: P,
    pub factor: f64,
}

impl<P: GuidanceProvider> GuidanceProvider for ScaledProvider<P> {
    fn guide(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        let mut out = self.inner.guide(request)?;
        out.residual.data.iter_mut().for_each(|v| *v = (*v as f64 * self.factor) as f32);
        out.weight_applied *= self.factor;
        Ok(out)
    }
}

/// Base64 of the little-endian `f32` bytes.
pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, GuidanceError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| GuidanceError::Protocol(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(GuidanceError::Protocol(format!("payload of {} bytes is not f32 data", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// JSON body of `POST /guidance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub prompt: String,
    pub step: u64,
    pub stage: Stage,
    pub cfg_weight: f32,
    pub t_min: f32,
    pub t_max: f32,
    pub shape: [usize; 3],
    pub image_b64: String,
}

impl WireRequest {
    pub fn from_request(r: &GuidanceRequest) -> Self {
        Self {
            id: r.id,
            prompt: r.prompt.clone(),
            step: r.step,
            stage: r.stage,
            cfg_weight: r.cfg_weight as f32,
            t_min: r.noise_range.0 as f32,
            t_max: r.noise_range.1 as f32,
            shape: r.image.shape(),
            image_b64: encode_f32(&r.image.data),
        }
    }

    pub fn image(&self) -> Result<GuidanceImage, GuidanceError> {
        let data = decode_f32(&self.image_b64)?;
        let [h, w, c] = self.shape;
        if c != 3 || data.len() != h * w * 3 {
            return Err(GuidanceError::Protocol(format!("{} values do not fill shape {:?}", data.len(), self.shape)));
        }
        Ok(GuidanceImage::new(h, w, data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub t_used: f32,
    pub weight: f32,
    pub residual_b64: String,
    /// Optional; must equal the request shape when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
}

impl WireResponse {
    pub fn from_response(id: u64, r: &GuidanceResponse) -> Self {
        Self {
            id,
            t_used: r.t_used as f32,
            weight: r.weight_applied as f32,
            residual_b64: encode_f32(&r.residual.data),
            shape: Some(r.residual.shape()),
        }
    }

    /// Checks the response against its request and decodes it.
    pub fn decode(&self, request: &WireRequest) -> Result<GuidanceResponse, GuidanceError> {
        if self.id != request.id {
            return Err(GuidanceError::Protocol(format!("response id {} for request {}", self.id, request.id)));
        }
        let [h, w, _] = request.shape;
        if let Some(shape) = self.shape {
            check_shape(request.shape, shape)?;
        }
        let data = decode_f32(&self.residual_b64)?;
        if data.len() != h * w * 3 {
            let found = if data.len() % (w * 3).max(1) == 0 { [data.len() / (w * 3).max(1), w, 3] } else { [0, 0, data.len()] };
            return Err(GuidanceError::ShapeMismatch {
                expected: request.shape,
                found,
            });
        }
        if !data.iter().all(|v| v.is_finite()) || !self.t_used.is_finite() || !self.weight.is_finite() {
            return Err(GuidanceError::Protocol("non-finite values in response".into()));
        }
        Ok(GuidanceResponse {
            residual: GuidanceImage::new(h, w, data),
            weight_applied: self.weight as f64,
            t_used: self.t_used as f64,
        })
    }
}

/// Client for a guidance service speaking the JSON wire format.
#[cfg(feature = "remote")]
pub struct RemoteProvider {
    url: String,
    agent: ureq::Agent,
}

#[cfg(feature = "remote")]
impl RemoteProvider {
    /// `endpoint` is `host:port` or a full `http://` URL; the `/guidance`
    /// path is appended when missing.
    pub fn new(endpoint: &str, timeout: std::time::Duration) -> Self {
        let mut url = if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            endpoint.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", endpoint.trim_end_matches('/'))
        };
        if !url.ends_with("/guidance") {
            url.push_str("/guidance");
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            url,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

#[cfg(feature = "remote")]
fn transport_error(e: ureq::Error) -> GuidanceError {
    match e {
        ureq::Error::Timeout(_) => GuidanceError::Timeout,
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => GuidanceError::Timeout,
        ureq::Error::Protocol(p) => GuidanceError::Protocol(p.to_string()),
        other => GuidanceError::Unavailable(other.to_string()),
    }
}

#[cfg(feature = "remote")]
impl GuidanceProvider for RemoteProvider {
    fn guide(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        request.validate()?;
        let wire = WireRequest::from_request(request);
        let body = serde_json::to_string(&wire).expect("request serializes");
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(transport_error)?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(GuidanceError::Unavailable(format!("HTTP status {status}")));
        }
        let text = resp.body_mut().read_to_string().map_err(transport_error)?;
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| GuidanceError::Protocol(format!("bad response body: {e}")))?;
        parsed.decode(&wire)
    }
}
