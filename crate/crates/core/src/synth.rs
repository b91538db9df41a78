//! Synthetic driving-like scenes where single frames can be ambiguous but
//! short clips are not.
//!
//! A scene is four horizontal stuff bands (building, terrain, sidewalk, road
//! from top to bottom) whose textures scroll with the camera, plus cars
//! (rectangles) and persons (ellipses) moving horizontally. Each frame every
//! band may independently "flicker", taking the exact texture of its paired
//! class, and the image margin is blurred and noised. Labels never see any of
//! this corruption.
//!
//! All geometry is aligned to 4-pixel cells, so feature-resolution
//! predictions can in principle be exact.

use rand_core::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{mix64, Rng64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 6;
pub const IGNORE_INDEX: u8 = 255;

pub const ROAD: u8 = 0;
pub const SIDEWALK: u8 = 1;
pub const TERRAIN: u8 = 2;
pub const BUILDING: u8 = 3;
pub const CAR: u8 = 4;
pub const PERSON: u8 = 5;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["road", "sidewalk", "terrain", "building", "car", "person"];
pub const STUFF_CLASSES: [u8; 4] = [ROAD, SIDEWALK, TERRAIN, BUILDING];
pub const THING_CLASSES: [u8; 2] = [CAR, PERSON];

/// Stuff bands from the top of the frame down.
pub const BAND_ORDER: [u8; 4] = [BUILDING, TERRAIN, SIDEWALK, ROAD];

/// Geometry grid in pixels.
pub const CELL: usize = 4;

pub const CAR_WIDTHS: [usize; 3] = [16, 20, 24];
pub const CAR_HEIGHTS: [usize; 2] = [8, 12];
pub const PERSON_WIDTH: usize = 8;
pub const PERSON_HEIGHTS: [usize; 2] = [12, 16];

/// The class whose texture a flickering stuff region borrows: road and
/// sidewalk swap, as do terrain and building.
pub fn flicker_pair(class: u8) -> u8 {
    debug_assert!(class < 4);
    class ^ 1
}

const BASE_COLOURS: [[f64; 3]; NUM_CLASSES] = [
    [0.30, 0.30, 0.34],
    [0.62, 0.58, 0.55],
    [0.30, 0.56, 0.25],
    [0.56, 0.34, 0.30],
    [0.15, 0.25, 0.72],
    [0.86, 0.76, 0.30],
];

/// Peak-to-peak amplitude of the hashed texture noise. Base colours of any
/// two classes differ by more than this in some channel.
const TEXTURE_AMPLITUDE: f64 = 0.16;

const STREAM_GEOMETRY: u64 = 1;
const STREAM_FLICKER: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub ignore_index: u8,
    /// Horizontal texture scroll of the stuff bands, pixels per frame.
    pub camera_speed: i64,
    pub num_cars: usize,
    pub num_persons: usize,
    /// Object speed magnitudes are drawn uniformly from `min..=max`.
    pub object_speed_min: usize,
    pub object_speed_max: usize,
    pub flicker_prob: f64,
    pub border_band: usize,
    pub noise_sigma: f64,
    pub num_frames: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_classes: NUM_CLASSES,
            ignore_index: IGNORE_INDEX,
            camera_speed: 2,
            num_cars: 2,
            num_persons: 2,
            object_speed_min: 4,
            object_speed_max: 4,
            flicker_prob: 0.3,
            border_band: 6,
            noise_sigma: 0.08,
            num_frames: 8,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// The same scene family with every corruption switched off.
    pub fn clean(&self) -> Self {
        Self { flicker_prob: 0.0, border_band: 0, noise_sigma: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("zero extent {}x{}", self.width, self.height));
        }
        if !self.width.is_multiple_of(CELL) || !self.height.is_multiple_of(CELL) {
            return bad(format!("extent {}x{} not divisible by {CELL}", self.width, self.height));
        }
        if self.height / CELL < BAND_ORDER.len() {
            return bad(format!("height {} leaves no room for four bands", self.height));
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if (self.ignore_index as usize) < NUM_CLASSES {
            return bad(format!("ignore_index {} collides with a class", self.ignore_index));
        }
        if !(0.0..=1.0).contains(&self.flicker_prob) {
            return bad(format!("flicker_prob {} outside [0, 1]", self.flicker_prob));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad(format!("noise_sigma {} must be finite and nonnegative", self.noise_sigma));
        }
        if self.object_speed_min > self.object_speed_max {
            return bad(format!(
                "object speed range {}..={} is empty",
                self.object_speed_min, self.object_speed_max
            ));
        }
        if self.num_frames == 0 {
            return bad("num_frames must be positive".into());
        }
        if self.num_cars > 0 && (self.width < CAR_WIDTHS[2] || self.height < CAR_HEIGHTS[1]) {
            return bad(format!("{}x{} frame cannot hold a car", self.width, self.height));
        }
        if self.num_persons > 0 && (self.width < PERSON_WIDTH || self.height < PERSON_HEIGHTS[1]) {
            return bad(format!("{}x{} frame cannot hold a person", self.width, self.height));
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order; [`SceneSpec::set`] accepts the same keys.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("ignore_index", self.ignore_index.to_string()),
            ("camera_speed", self.camera_speed.to_string()),
            ("num_cars", self.num_cars.to_string()),
            ("num_persons", self.num_persons.to_string()),
            ("object_speed_min", self.object_speed_min.to_string()),
            ("object_speed_max", self.object_speed_max.to_string()),
            ("flicker_prob", self.flicker_prob.to_string()),
            ("border_band", self.border_band.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("num_frames", self.num_frames.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 14] = [
        "width",
        "height",
        "num_classes",
        "ignore_index",
        "camera_speed",
        "num_cars",
        "num_persons",
        "object_speed_min",
        "object_speed_max",
        "flicker_prob",
        "border_band",
        "noise_sigma",
        "num_frames",
        "seed",
    ];

    /// Sets one field from its text form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::InvalidSpec(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "width" => self.width = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "ignore_index" => self.ignore_index = parse(key, value)?,
            "camera_speed" => self.camera_speed = parse(key, value)?,
            "num_cars" => self.num_cars = parse(key, value)?,
            "num_persons" => self.num_persons = parse(key, value)?,
            "object_speed_min" => self.object_speed_min = parse(key, value)?,
            "object_speed_max" => self.object_speed_max = parse(key, value)?,
            "flicker_prob" => self.flicker_prob = parse(key, value)?,
            "border_band" => self.border_band = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "num_frames" => self.num_frames = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Car,
    Person,
}

impl ObjectKind {
    pub fn class(self) -> u8 {
        match self {
            ObjectKind::Car => CAR,
            ObjectKind::Person => PERSON,
        }
    }
}

/// A moving thing. Cars fill their box; persons fill the inscribed ellipse.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Left edge at frame 0.
    pub x0: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
    /// Pixels per frame, signed.
    pub vx: i64,
}

impl SceneObject {
    pub fn left_at(&self, t: usize) -> i64 {
        self.x0 + self.vx * t as i64
    }

    pub fn covers(&self, x: i64, y: i64, t: usize) -> bool {
        let left = self.left_at(t);
        let (dx, dy) = (x - left, y - self.y);
        if dx < 0 || dy < 0 || dx >= self.w as i64 || dy >= self.h as i64 {
            return false;
        }
        match self.kind {
            ObjectKind::Car => true,
            ObjectKind::Person => {
                let (a, b) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let u = (dx as f64 + 0.5 - a) / a;
                let v = (dy as f64 + 0.5 - b) / b;
                u * u + v * v <= 1.0
            }
        }
    }
}

/// Everything about a sequence that stays fixed across its frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub width: usize,
    pub height: usize,
    /// Heights in pixels of the bands in [`BAND_ORDER`].
    pub band_heights: [usize; 4],
    pub cars: Vec<SceneObject>,
    pub persons: Vec<SceneObject>,
    /// `car_over_person[c * persons.len() + p]`: whether car `c` is drawn over person `p`.
    pub car_over_person: Vec<bool>,
    pub texture_seed: u64,
    pub camera_speed: i64,
}

fn pick<T: Copy>(rng: &mut Rng64, options: &[T]) -> T {
    options[rng.below(options.len() as u64) as usize]
}

/// Uniform composition of `extra` cells into four nonnegative parts.
fn stars_and_bars(rng: &mut Rng64, extra: usize) -> [usize; 4] {
    let slots = extra as u64 + 3;
    let mut bars = Vec::with_capacity(3);
    while bars.len() < 3 {
        let b = rng.below(slots);
        if !bars.contains(&b) {
            bars.push(b);
        }
    }
    bars.sort_unstable();
    let b: Vec<usize> = bars.into_iter().map(|v| v as usize).collect();
    [b[0], b[1] - b[0] - 1, b[2] - b[1] - 1, extra + 2 - b[2]]
}

impl SceneLayout {
    pub fn sample(spec: &SceneSpec, sequence_index: u64) -> Self {
        let mut rng = Rng64::stream(spec.seed, &[sequence_index, STREAM_GEOMETRY]);
        let cells = spec.height / CELL;
        let min_cells = (cells / 8).max(1);
        let parts = stars_and_bars(&mut rng, cells - 4 * min_cells);
        let band_heights = parts.map(|p| (p + min_cells) * CELL);

        let object = |kind: ObjectKind, w: usize, h: usize, rng: &mut Rng64| {
            let x0 = (rng.below(((spec.width - w) / CELL + 1) as u64) as usize * CELL) as i64;
            let y = (rng.below(((spec.height - h) / CELL + 1) as u64) as usize * CELL) as i64;
            let span = (spec.object_speed_max - spec.object_speed_min + 1) as u64;
            let speed = (spec.object_speed_min as u64 + rng.below(span)) as i64;
            let vx = if rng.bernoulli(0.5) { speed } else { -speed };
            SceneObject { kind, x0, y, w, h, vx }
        };
        let cars: Vec<_> = (0..spec.num_cars)
            .map(|_| {
                let w = pick(&mut rng, &CAR_WIDTHS);
                let h = pick(&mut rng, &CAR_HEIGHTS);
                object(ObjectKind::Car, w, h, &mut rng)
            })
            .collect();
        let persons: Vec<_> = (0..spec.num_persons)
            .map(|_| {
                let h = pick(&mut rng, &PERSON_HEIGHTS);
                object(ObjectKind::Person, PERSON_WIDTH, h, &mut rng)
            })
            .collect();
        let car_over_person = (0..cars.len() * persons.len()).map(|_| rng.bernoulli(0.5)).collect();
        let texture_seed = rng.next_u64();
        Self {
            width: spec.width,
            height: spec.height,
            band_heights,
            cars,
            persons,
            car_over_person,
            texture_seed,
            camera_speed: spec.camera_speed,
        }
    }

    /// Stuff class of image row `y`.
    pub fn band_class(&self, y: usize) -> u8 {
        let mut top = 0;
        for (class, h) in BAND_ORDER.iter().zip(self.band_heights) {
            top += h;
            if y < top {
                return *class;
            }
        }
        ROAD
    }

    /// The topmost object at a pixel, if any.
    pub fn object_at(&self, x: i64, y: i64, t: usize) -> Option<&SceneObject> {
        let car = self.cars.iter().rposition(|o| o.covers(x, y, t));
        let person = self.persons.iter().rposition(|o| o.covers(x, y, t));
        match (car, person) {
            (Some(c), Some(p)) => {
                if self.car_over_person[c * self.persons.len() + p] {
                    Some(&self.cars[c])
                } else {
                    Some(&self.persons[p])
                }
            }
            (Some(c), None) => Some(&self.cars[c]),
            (None, Some(p)) => Some(&self.persons[p]),
            (None, None) => None,
        }
    }

    pub fn mask(&self, t: usize) -> Vec<u8> {
        let mut m = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            let stuff = self.band_class(y);
            for x in 0..self.width {
                m.push(self.object_at(x as i64, y as i64, t).map_or(stuff, |o| o.kind.class()));
            }
        }
        m
    }

    /// Uncorrupted-by-noise RGB in `[0, 1]`, interleaved, with the given
    /// stuff classes (indexed by class id) showing their paired texture.
    pub fn render(&self, t: usize, flickered: [bool; 4]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        let scroll = self.camera_speed * t as i64;
        for y in 0..self.height {
            let stuff = self.band_class(y);
            for x in 0..self.width {
                let rgb = match self.object_at(x as i64, y as i64, t) {
                    Some(o) => {
                        let salt = self.texture_seed ^ mix64(o.x0 as u64 ^ ((o.y as u64) << 20));
                        texture(o.kind.class(), x as i64 - o.left_at(t), y as i64 - o.y, salt)
                    }
                    None => {
                        let shown = if flickered[stuff as usize] { flicker_pair(stuff) } else { stuff };
                        texture(shown, x as i64 + scroll, y as i64, self.texture_seed)
                    }
                };
                out.extend_from_slice(&rgb);
            }
        }
        out
    }
}

/// Base colour of `class` plus hashed high-frequency noise at world position `(wx, wy)`.
pub fn texture(class: u8, wx: i64, wy: i64, seed: u64) -> [f64; 3] {
    let h = mix64(
        seed.wrapping_add((class as u64) << 56)
            ^ (wx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (wy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    let v = ((h >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * TEXTURE_AMPLITUDE;
    BASE_COLOURS[class as usize].map(|c| c + v)
}

/// Class whose base colour is nearest to `rgb`; a lookup classifier for clean frames.
pub fn nearest_base_class(rgb: [f64; 3]) -> u8 {
    let dist = |c: &[f64; 3]| c.iter().zip(rgb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..NUM_CLASSES)
        .min_by(|&a, &b| dist(&BASE_COLOURS[a]).total_cmp(&dist(&BASE_COLOURS[b])))
        .unwrap() as u8
}

/// One 8-bit RGB frame, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    /// `[3, H, W]` planar tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            T::lit(self.rgb[p * 3 + c] as f64 / 255.0)
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [0, 1, 2].map(|c| self.rgb[i + c] as f64 / 255.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Frame>,
    pub masks: Vec<Vec<u8>>,
    /// Per frame, which stuff classes (by class id) showed their paired
    /// texture. Analysis only; empty when unknown.
    pub flickered: Vec<[bool; 4]>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 3x3 box blur plus Gaussian noise on every pixel within `band` of an edge.
fn corrupt_border(img: &mut [f64], w: usize, h: usize, band: usize, noise: Option<(&Normal<f64>, &mut Rng64)>) {
    if band == 0 {
        return;
    }
    let src = img.to_vec();
    let in_band = |x: usize, y: usize| x < band || y < band || x + band >= w || y + band >= h;
    let mut noise = noise;
    for y in 0..h {
        for x in 0..w {
            if !in_band(x, y) {
                continue;
            }
            for c in 0..3 {
                let mut s = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        s += src[(sy * w + sx) * 3 + c];
                    }
                }
                let mut v = s / 9.0;
                if let Some((dist, rng)) = noise.as_mut() {
                    v += dist.sample(*rng);
                }
                img[(y * w + x) * 3 + c] = v;
            }
        }
    }
}

/// Deterministic in `(spec.seed, sequence_index)`.
pub fn generate_sequence(spec: &SceneSpec, sequence_index: u64) -> Result<LabeledSequence> {
    spec.validate()?;
    let layout = SceneLayout::sample(spec, sequence_index);
    let mut flicker_rng = Rng64::stream(spec.seed, &[sequence_index, STREAM_FLICKER]);
    let mut noise_rng = Rng64::stream(spec.seed, &[sequence_index, STREAM_NOISE]);
    let normal = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("validated sigma"));
    let (w, h) = (spec.width, spec.height);
    let mut seq = LabeledSequence { width: w, height: h, frames: vec![], masks: vec![], flickered: vec![] };
    for t in 0..spec.num_frames {
        let mut flickered = [false; 4];
        for f in &mut flickered {
            *f = flicker_rng.bernoulli(spec.flicker_prob);
        }
        let mut img = layout.render(t, flickered);
        corrupt_border(&mut img, w, h, spec.border_band, normal.as_ref().map(|d| (d, &mut noise_rng)));
        seq.frames.push(Frame { width: w, height: h, rgb: img.into_iter().map(quantize).collect() });
        seq.masks.push(layout.mask(t));
        seq.flickered.push(flickered);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compositions_sum_and_stay_in_range() {
        let mut r = Rng64::seed_from(1);
        for extra in [0, 1, 5, 12] {
            for _ in 0..200 {
                let p = stars_and_bars(&mut r, extra);
                assert_eq!(p.iter().sum::<usize>(), extra);
            }
        }
    }

    #[test]
    fn bands_tile_the_frame() {
        let spec = SceneSpec::default();
        for i in 0..20 {
            let l = SceneLayout::sample(&spec, i);
            assert_eq!(l.band_heights.iter().sum::<usize>(), spec.height);
            assert!(l.band_heights.iter().all(|&b| b >= 8 && b % CELL == 0));
        }
    }

    #[test]
    fn person_ellipse_is_symmetric() {
        let p = SceneObject { kind: ObjectKind::Person, x0: 0, y: 0, w: 8, h: 16, vx: 0 };
        let n = (0..8).flat_map(|x| (0..16).map(move |y| (x, y))).filter(|&(x, y)| p.covers(x, y, 0)).count();
        assert!(n > 80 && n < 128, "{n}");
        assert!(p.covers(3, 8, 0) && !p.covers(0, 0, 0));
    }

    #[test]
    fn invalid_specs() {
        let ok = SceneSpec::default();
        for bad in [
            SceneSpec { width: 0, ..ok.clone() },
            SceneSpec { height: 30, ..ok.clone() },
            SceneSpec { flicker_prob: 1.5, ..ok.clone() },
            SceneSpec { flicker_prob: -0.1, ..ok.clone() },
            SceneSpec { num_classes: 5, ..ok.clone() },
            SceneSpec { object_speed_min: 5, object_speed_max: 4, ..ok.clone() },
        ] {
            assert!(matches!(generate_sequence(&bad, 0), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn set_round_trips_entries() {
        let spec = SceneSpec { seed: 99, flicker_prob: 0.125, camera_speed: -3, ..Default::default() };
        let mut back = SceneSpec { width: 8, ..Default::default() };
        for (k, v) in spec.entries() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, spec);
        assert!(!back.set("nope", "1").unwrap());
        assert_eq!(SceneSpec::KEYS.to_vec(), spec.entries().iter().map(|e| e.0).collect::<Vec<_>>());
    }
}
