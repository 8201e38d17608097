//! Labeled synthetic crosswalk scenes: flat-shaded multiview rasters with
//! smooth seeded texture, consistent detections and masks, frame pairs for
//! flow, and ground-truth sidecars.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{save_manifest, DatasetError, DatasetManifest, ManifestItem};
use crate::rules::{
    classify, enumerate_rule_coverage, LightState, RuleProvenance, SafetyScore, SceneAttributes, SignalState,
    TriState,
};
use crate::vision::{BoxPx, Detection, MaskInstance, MultiviewFrame, RasterImage, Rgb, VisionError, Viewpoint};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unreachable score mix: {0}")]
    UnreachableMix(String),
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SynthError {
    SynthError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

pub const DEFAULT_NOISE: u8 = 12;
pub const DEFAULT_SIZE: (u32, u32) = (320, 240);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarSpec {
    pub viewpoint: Viewpoint,
    pub bbox: BoxPx,
    /// Pixels per frame.
    pub velocity: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianSpec {
    pub viewpoint: Viewpoint,
    pub bbox: BoxPx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub attributes: SceneAttributes,
    pub width: u32,
    pub height: u32,
    pub cars: Vec<CarSpec>,
    pub pedestrians: Vec<PedestrianSpec>,
    pub light_color: LightState,
    pub signal_state: SignalState,
    pub texture_noise_amplitude: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub attributes: SceneAttributes,
    pub score: SafetyScore,
    pub provenance: RuleProvenance,
}

impl GroundTruth {
    pub fn from_attributes(attributes: SceneAttributes) -> Self {
        let (score, provenance) = classify(&attributes);
        Self {
            attributes,
            score,
            provenance,
        }
    }
}

// palette; light colors are kept far from every other element's color
const SKY: Rgb = [150, 165, 180];
const SIDEWALK: Rgb = [170, 160, 150];
const ROAD: Rgb = [90, 90, 95];
const STRIPE: Rgb = [235, 235, 235];
const HOUSING: Rgb = [35, 35, 35];
pub const LIGHT_RED: Rgb = [230, 20, 20];
pub const LIGHT_YELLOW: Rgb = [240, 200, 0];
pub const LIGHT_GREEN: Rgb = [0, 200, 80];
pub const WALK_BAR: Rgb = [40, 255, 200];
pub const HAND_BLOCK: Rgb = [255, 120, 0];
pub const CAR_BODY: Rgb = [40, 70, 180];
pub const PEDESTRIAN: Rgb = [190, 110, 200];

pub fn light_rgb(light: LightState) -> Option<Rgb> {
    match light {
        LightState::Red => Some(LIGHT_RED),
        LightState::Yellow => Some(LIGHT_YELLOW),
        LightState::Green => Some(LIGHT_GREEN),
        LightState::NotVisible => None,
    }
}

/// Fixed scenery geometry for a viewpoint image of the given size.
pub struct Scenery {
    pub road: (u32, u32),
    pub light_center: (f32, f32),
    pub light_radius: f32,
    pub signal_rect: BoxPx,
}

impl Scenery {
    pub fn for_size(w: u32, h: u32) -> Self {
        let (wf, hf) = (w as f32, h as f32);
        Self {
            road: ((hf * 0.42) as u32, (hf * 0.85) as u32),
            light_center: (wf * 0.12, hf * 0.16),
            light_radius: hf * 0.06,
            signal_rect: BoxPx::new(wf * 0.82, hf * 0.06, wf * 0.92, hf * 0.30),
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Smooth value noise in `[-amplitude, amplitude]`, continuous in (x, y) so
/// a translated layer samples the same texture at shifted coordinates.
struct ValueNoise {
    seed: u64,
    amplitude: f32,
    cell: f32,
}

impl ValueNoise {
    fn lattice(&self, ix: i64, iy: i64) -> f32 {
        let h = splitmix(self.seed ^ splitmix((ix as u64).wrapping_mul(0x1000_0000_01b3) ^ (iy as u64).rotate_left(32)));
        (h >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
    }

    fn at(&self, x: f32, y: f32) -> f32 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - x0, gy - y0);
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(fx), s(fy));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let top = self.lattice(ix, iy) * (1.0 - sx) + self.lattice(ix + 1, iy) * sx;
        let bot = self.lattice(ix, iy + 1) * (1.0 - sx) + self.lattice(ix + 1, iy + 1) * sx;
        self.amplitude * (top * (1.0 - sy) + bot * sy)
    }
}

const NOISE_CELL: f32 = 7.0;

fn add_noise(c: Rgb, n: f32) -> Rgb {
    c.map(|v| (v as f32 + n).round().clamp(0.0, 255.0) as u8)
}

/// Pixels whose centers fall inside the box.
fn covers(b: &BoxPx, x: u32, y: u32) -> bool {
    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
    px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2
}

fn vp_salt(vp: Viewpoint) -> u64 {
    0x5eed_0000 + vp.index() as u64
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let a = &self.attributes;
        if self.width < 32 || self.height < 32 {
            return Err(invalid("width/height", format!("{}x{} is below 32x32", self.width, self.height)));
        }
        if self.light_color != a.traffic_light {
            return Err(invalid(
                "light_color",
                format!("{} disagrees with attributes.traffic_light {}", self.light_color, a.traffic_light),
            ));
        }
        if self.signal_state != a.pedestrian_signal {
            return Err(invalid(
                "signal_state",
                format!("{} disagrees with attributes.pedestrian_signal {}", self.signal_state, a.pedestrian_signal),
            ));
        }
        let moving = self.cars.iter().any(|c| c.velocity != (0.0, 0.0));
        match a.moving_car {
            TriState::Yes if !moving => return Err(invalid("cars", "moving_car = yes needs a car with nonzero velocity")),
            TriState::No if moving => return Err(invalid("cars", "moving_car = no but a car has nonzero velocity")),
            TriState::NotVisible if !self.cars.is_empty() => {
                return Err(invalid("cars", "moving_car = not_visible but cars are rendered"))
            }
            _ => {}
        }
        let peds = !self.pedestrians.is_empty();
        if peds != (a.crossing_pedestrian == TriState::Yes) {
            return Err(invalid(
                "pedestrians",
                format!("crossing_pedestrian = {} but {} pedestrian boxes given", a.crossing_pedestrian, self.pedestrians.len()),
            ));
        }
        let (w, h) = (self.width as f32, self.height as f32);
        let inside = |b: &BoxPx| b.is_well_formed() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h;
        for (i, car) in self.cars.iter().enumerate() {
            let moved = car.bbox.translate(car.velocity.0, car.velocity.1);
            if !inside(&car.bbox) || !inside(&moved) {
                return Err(invalid(format!("cars[{i}].bbox"), "box must lie inside the image in both frames"));
            }
            if car.viewpoint == Viewpoint::Bottom {
                return Err(invalid(format!("cars[{i}].viewpoint"), "no cars in the bottom view"));
            }
        }
        for (i, p) in self.pedestrians.iter().enumerate() {
            if !inside(&p.bbox) {
                return Err(invalid(format!("pedestrians[{i}].bbox"), "box must lie inside the image"));
            }
        }
        Ok(())
    }

    fn render_view(&self, vp: Viewpoint, frame: u32) -> Result<RasterImage, SynthError> {
        let (w, h) = (self.width, self.height);
        let scenery = Scenery::for_size(w, h);
        let bg_noise = ValueNoise {
            seed: splitmix(self.seed ^ vp_salt(vp)),
            amplitude: self.texture_noise_amplitude as f32,
            cell: NOISE_CELL,
        };
        let cars: Vec<(BoxPx, ValueNoise)> = self
            .cars
            .iter()
            .enumerate()
            .filter(|(_, c)| c.viewpoint == vp)
            .map(|(i, c)| {
                let t = frame as f32;
                let b = c.bbox.translate(c.velocity.0 * t, c.velocity.1 * t);
                let noise = ValueNoise {
                    seed: splitmix(self.seed ^ 0xca5 ^ (i as u64) << 8),
                    amplitude: self.texture_noise_amplitude.max(6) as f32 * 1.5,
                    cell: NOISE_CELL,
                };
                (b, noise)
            })
            .collect();
        let peds: Vec<&BoxPx> = self.pedestrians.iter().filter(|p| p.viewpoint == vp).map(|p| &p.bbox).collect();
        let light = if vp == Viewpoint::Front { light_rgb(self.light_color) } else { None };
        let signal = if vp == Viewpoint::Front { Some(self.signal_state) } else { None };

        let mut pixels = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                if let Some((b, noise)) = cars.iter().rev().find(|(b, _)| covers(b, x, y)) {
                    pixels.extend_from_slice(&add_noise(CAR_BODY, noise.at(px - b.x1, py - b.y1)));
                    continue;
                }
                let mut c = self.static_color(vp, &scenery, x, y);
                if peds.iter().any(|b| covers(b, x, y)) {
                    c = PEDESTRIAN;
                }
                if let Some(lc) = light {
                    let (dx, dy) = (px - scenery.light_center.0, py - scenery.light_center.1);
                    let r = scenery.light_radius;
                    if dx.abs() <= r * 1.4 && dy.abs() <= r * 1.4 {
                        c = HOUSING;
                    }
                    if dx * dx + dy * dy <= r * r {
                        c = lc;
                    }
                }
                match signal {
                    Some(SignalState::NotVisible) | None => {}
                    Some(state) => {
                        let s = &scenery.signal_rect;
                        if covers(s, x, y) {
                            c = HOUSING;
                            let (sw, sh) = (s.x2 - s.x1, s.y2 - s.y1);
                            let inner = match state {
                                // narrow upright walking bar
                                SignalState::Go => BoxPx::new(s.x1 + sw * 0.38, s.y1 + sh * 0.15, s.x2 - sw * 0.38, s.y2 - sh * 0.15),
                                // wide hand block
                                _ => BoxPx::new(s.x1 + sw * 0.15, s.y1 + sh * 0.25, s.x2 - sw * 0.15, s.y2 - sh * 0.25),
                            };
                            if covers(&inner, x, y) {
                                c = if state == SignalState::Go { WALK_BAR } else { HAND_BLOCK };
                            }
                        }
                    }
                }
                pixels.extend_from_slice(&add_noise(c, bg_noise.at(px, py)));
            }
        }
        Ok(RasterImage::from_raw(w, h, pixels)?)
    }

    fn static_color(&self, vp: Viewpoint, s: &Scenery, x: u32, y: u32) -> Rgb {
        let (w, h) = (self.width, self.height);
        if vp == Viewpoint::Bottom {
            // looking down at the curb: sidewalk then crosswalk stripes
            if y < h / 3 {
                return SIDEWALK;
            }
            let band = h / 10;
            return if (y / band.max(1)) % 2 == 0 { STRIPE } else { ROAD };
        }
        if y < s.road.0 {
            return if y < s.road.0 / 2 { SKY } else { SIDEWALK };
        }
        if y >= s.road.1 {
            return SIDEWALK;
        }
        if vp == Viewpoint::Front && x > w / 4 && x < 3 * w / 4 {
            let stripe = (w / 20).max(1);
            if ((x - w / 4) / stripe) % 2 == 0 {
                return STRIPE;
            }
        }
        ROAD
    }

    fn render_frame(&self, frame: u32) -> Result<MultiviewFrame, SynthError> {
        let mut images = BTreeMap::new();
        for vp in Viewpoint::ALL {
            images.insert(vp, self.render_view(vp, frame)?);
        }
        Ok(MultiviewFrame {
            images,
            captured_at: None,
        })
    }

    pub fn detections(&self) -> Vec<Detection> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ 0xde7));
        let cars = self.cars.iter().map(|c| (c.viewpoint, "car", c.bbox));
        let peds = self.pedestrians.iter().map(|p| (p.viewpoint, "person", p.bbox));
        cars.chain(peds)
            .map(|(viewpoint, class, bbox)| Detection {
                viewpoint,
                class_name: class.into(),
                confidence: (rng.gen_range(0.55f32..0.98) * 100.0).round() / 100.0,
                bbox,
            })
            .collect()
    }

    pub fn masks(&self) -> Vec<MaskInstance> {
        let rect_poly = |b: &BoxPx| vec![[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]];
        let scenery = Scenery::for_size(self.width, self.height);
        let (w, h) = (self.width as f32, self.height as f32);
        let mut out: Vec<MaskInstance> = [Viewpoint::Front, Viewpoint::Left, Viewpoint::Right]
            .into_iter()
            .map(|vp| MaskInstance {
                viewpoint: vp,
                class_name: "road".into(),
                confidence: 0.9,
                polygon: rect_poly(&BoxPx::new(0.0, scenery.road.0 as f32, w, scenery.road.1 as f32)),
            })
            .collect();
        out.push(MaskInstance {
            viewpoint: Viewpoint::Bottom,
            class_name: "crosswalk".into(),
            confidence: 0.9,
            polygon: rect_poly(&BoxPx::new(0.0, (self.height / 3) as f32, w, h)),
        });
        for d in self.detections() {
            out.push(MaskInstance {
                viewpoint: d.viewpoint,
                class_name: d.class_name,
                confidence: d.confidence,
                polygon: rect_poly(&d.bbox),
            });
        }
        out
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::from_attributes(self.attributes)
    }
}

pub fn render_scene(spec: &SceneSpec) -> Result<MultiviewFrame, SynthError> {
    spec.validate()?;
    spec.render_frame(0)
}

/// Frame 0 per spec and frame 1 with every car advanced by its velocity.
pub fn render_frame_pair(spec: &SceneSpec) -> Result<(MultiviewFrame, MultiviewFrame), SynthError> {
    spec.validate()?;
    Ok((spec.render_frame(0)?, spec.render_frame(1)?))
}

/// A textured view and the same texture translated by `d` pixels, for
/// checking flow recovery against a known global motion.
pub fn translated_texture_pair(seed: u64, width: u32, height: u32, d: (f32, f32)) -> Result<(RasterImage, RasterImage), SynthError> {
    let noise = ValueNoise {
        seed: splitmix(seed),
        amplitude: 90.0,
        cell: NOISE_CELL,
    };
    let render = |shift: (f32, f32)| {
        let mut px = Vec::with_capacity((width * height * 3) as usize);
        for y in 0..height {
            for x in 0..width {
                let v = noise.at(x as f32 + 0.5 - shift.0, y as f32 + 0.5 - shift.1);
                px.extend_from_slice(&add_noise([128, 128, 128], v));
            }
        }
        RasterImage::from_raw(width, height, px)
    };
    Ok((render((0.0, 0.0))?, render(d)?))
}

const MOTIONS: [(f32, f32); 20] = [
    (1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (-1.0, 0.0), (-2.0, 0.0), (-3.0, 0.0),
    (0.0, 1.0), (0.0, 2.0), (0.0, -1.0), (0.0, -2.0),
    (1.0, 1.0), (2.0, 1.0), (-2.0, 1.0), (1.0, -2.0), (-1.0, -1.0), (2.0, -2.0),
    (1.5, 0.5), (-2.5, 0.0), (0.5, 1.5), (-1.5, -1.5),
];

fn place_box(rng: &mut ChaCha8Rng, w: f32, bw: f32, bh: f32, y_range: (f32, f32), margin: f32) -> BoxPx {
    let x = rng.gen_range(margin..(w - bw - margin)).round();
    let y = rng.gen_range(y_range.0..(y_range.1 - bh).max(y_range.0 + 1.0)).round();
    BoxPx::new(x, y, x + bw, y + bh)
}

/// Samples a consistent scene layout for the given attributes.
pub fn sample_scene(seed: u64, attributes: SceneAttributes, noise: u8) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = DEFAULT_SIZE;
    let (wf, hf) = (w as f32, h as f32);
    let scenery = Scenery::for_size(w, h);
    let road = (scenery.road.0 as f32, scenery.road.1 as f32);
    let street_views = [Viewpoint::Front, Viewpoint::Left, Viewpoint::Right];

    let mut cars = Vec::new();
    let n_cars = match attributes.moving_car {
        TriState::Yes => rng.gen_range(1..=2),
        TriState::No => rng.gen_range(0..=1),
        TriState::NotVisible => 0,
    };
    for i in 0..n_cars {
        let velocity = if attributes.moving_car == TriState::Yes && i == 0 {
            MOTIONS[rng.gen_range(0..MOTIONS.len())]
        } else {
            (0.0, 0.0)
        };
        let viewpoint = street_views[rng.gen_range(0..street_views.len())];
        let (bw, bh) = (rng.gen_range(80..=120) as f32, rng.gen_range(48..=64) as f32);
        let bbox = place_box(&mut rng, wf, bw, bh, (road.0 + 4.0, road.1 - 4.0), 8.0);
        cars.push(CarSpec { viewpoint, bbox, velocity });
    }

    let mut pedestrians = Vec::new();
    if attributes.crossing_pedestrian == TriState::Yes {
        let n = rng.gen_range(1..=2);
        let mut attempts = 0;
        while pedestrians.len() < n && attempts < 64 {
            attempts += 1;
            let viewpoint = if rng.gen_bool(0.6) { Viewpoint::Front } else { street_views[rng.gen_range(1..3)] };
            let (bw, bh) = (rng.gen_range(14..=22) as f32, rng.gen_range(40..=56) as f32);
            let bbox = place_box(&mut rng, wf, bw, bh, (road.0, road.1), 4.0);
            let clear = cars.iter().filter(|c| c.viewpoint == viewpoint).all(|c| {
                let moved = c.bbox.translate(c.velocity.0, c.velocity.1);
                crate::vision::iou(&c.bbox, &bbox) == 0.0 && crate::vision::iou(&moved, &bbox) == 0.0
            }) && pedestrians
                .iter()
                .filter(|p: &&PedestrianSpec| p.viewpoint == viewpoint)
                .all(|p| crate::vision::iou(&p.bbox, &bbox) == 0.0);
            if clear {
                pedestrians.push(PedestrianSpec { viewpoint, bbox });
            }
        }
        if pedestrians.is_empty() {
            // every street view was crowded; the bottom view never has cars
            pedestrians.push(PedestrianSpec {
                viewpoint: Viewpoint::Bottom,
                bbox: BoxPx::new(wf * 0.45, hf * 0.45, wf * 0.45 + 18.0, hf * 0.45 + 48.0),
            });
        }
    }

    SceneSpec {
        seed,
        attributes,
        width: w,
        height: h,
        cars,
        pedestrians,
        light_color: attributes.traffic_light,
        signal_state: attributes.pedestrian_signal,
        texture_noise_amplitude: noise,
    }
}

/// Target distribution over safety levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMix {
    /// Weight per level, -2 first.
    pub weights: [f64; 5],
}

impl ScoreMix {
    pub fn uniform() -> Self {
        Self { weights: [1.0; 5] }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SynthError::UnreachableMix("weights must be finite and non-negative".into()));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(SynthError::UnreachableMix("weights sum to zero".into()));
        }
        let coverage = enumerate_rule_coverage();
        for s in SafetyScore::ALL {
            if self.weights[s.index()] > 0.0 && coverage.count_for(s) == 0 {
                return Err(SynthError::UnreachableMix(format!("no attribute combination yields {}", s.level())));
            }
        }
        Ok(())
    }
}

impl FromStr for ScoreMix {
    type Err = SynthError;

    /// `uniform`, or comma-separated `level:weight` pairs, e.g. `-2:3,0:1,2:1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "uniform" {
            return Ok(Self::uniform());
        }
        let mut weights = [0.0; 5];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (level, weight) = part
                .rsplit_once(':')
                .ok_or_else(|| SynthError::UnreachableMix(format!("expected level:weight, got {part:?}")))?;
            let level: i64 = level
                .trim()
                .parse()
                .map_err(|_| SynthError::UnreachableMix(format!("bad level {level:?}")))?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| SynthError::UnreachableMix(format!("bad weight {weight:?}")))?;
            let score = SafetyScore::from_level(level)
                .map_err(|_| SynthError::UnreachableMix(format!("level {level} is not producible")))?;
            weights[score.index()] = weight;
        }
        let mix = Self { weights };
        mix.validate()?;
        Ok(mix)
    }
}

fn sample_attributes(rng: &mut ChaCha8Rng, all: &[SceneAttributes], target: Option<SafetyScore>) -> SceneAttributes {
    loop {
        let a = all[rng.gen_range(0..all.len())];
        match target {
            Some(t) if classify(&a).0 != t => continue,
            _ => return a,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub mix: Option<ScoreMix>,
    pub noise: u8,
}

impl SynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            mix: None,
            noise: DEFAULT_NOISE,
        }
    }
}

pub fn item_id(index: usize) -> String {
    format!("item-{index:04}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut text = serde_json::to_string_pretty(value).map_err(DatasetError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_item(root: &Path, id: &str, spec: &SceneSpec) -> Result<ManifestItem, SynthError> {
    let dir = root.join("items").join(id);
    fs::create_dir_all(&dir).map_err(|source| SynthError::Io { path: dir.clone(), source })?;
    let (f0, f1) = render_frame_pair(spec)?;
    let mut item = ManifestItem::new(id);
    for vp in Viewpoint::ALL {
        let mut frames = Vec::new();
        for (k, frame) in [&f0, &f1].into_iter().enumerate() {
            let rel = format!("items/{id}/{vp}.{k}.png");
            frame.images[&vp].save_png(&root.join(&rel))?;
            frames.push(rel);
        }
        item.images.insert(vp, frames);
    }
    write_json(&dir.join("detections.json"), &spec.detections())?;
    write_json(&dir.join("masks.json"), &spec.masks())?;
    write_json(&dir.join("truth.json"), &spec.ground_truth())?;
    item.detections = Some(format!("items/{id}/detections.json"));
    item.masks = Some(format!("items/{id}/masks.json"));
    item.ground_truth = Some(format!("items/{id}/truth.json"));
    Ok(item)
}

/// Writes `n` scenes under `out` and returns the saved manifest.
pub fn generate_dataset(out: &Path, cfg: &SynthConfig) -> Result<DatasetManifest, SynthError> {
    if cfg.n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    let target_dist = match &cfg.mix {
        Some(mix) => {
            mix.validate()?;
            Some(WeightedIndex::new(mix.weights).map_err(|e| SynthError::UnreachableMix(e.to_string()))?)
        }
        None => None,
    };
    let all: Vec<SceneAttributes> = SceneAttributes::all().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs: Vec<(String, SceneSpec)> = (0..cfg.n)
        .map(|i| {
            let target = target_dist.as_ref().map(|d| SafetyScore::ALL[d.sample(&mut rng)]);
            let attrs = sample_attributes(&mut rng, &all, target);
            let item_seed: u64 = rng.gen();
            (item_id(i), sample_scene(item_seed, attrs, cfg.noise))
        })
        .collect();

    fs::create_dir_all(out).map_err(|source| SynthError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8);
    let chunk = specs.len().div_ceil(workers);
    let mut items: Vec<ManifestItem> = Vec::with_capacity(specs.len());
    std::thread::scope(|scope| -> Result<(), SynthError> {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|(id, spec)| write_item(out, id, spec)).collect::<Result<Vec<_>, _>>()))
            .collect();
        for h in handles {
            items.extend(h.join().expect("synth worker panicked")?);
        }
        Ok(())
    })?;

    let mut manifest = DatasetManifest::new(out);
    manifest.items = items;
    save_manifest(&manifest, &out.join("manifest.json"))?;
    Ok(manifest)
}
