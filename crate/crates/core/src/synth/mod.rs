//! Procedural egocentric-style video domains.
//!
//! A [`DomainSpec`] fixes the look of a domain (background, palette, sprite
//! shapes, illumination, sensor noise). An [`ActionSpec`] fixes what happens in
//! a clip: hand and object trajectories for one of eight actions. Rendering is
//! a pure function of `(spec, action, seed)`, and every frame carries tight
//! ground-truth boxes for the visible hands and the objects they handle.

mod dataset;
mod gap;
mod render;
mod scene;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

pub use dataset::{generate_domain, Dataset, Split, SplitRatios};
pub use gap::{domain_gap_report, GapReport};
pub use render::{render_clip, render_sprite_mask};
pub use scene::{ActionSpec, MotionParams, Sprite, SpriteShape, ACTION_NAMES, NUM_ACTIONS, SPEED_RANGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Flat,
    Gradient,
    Tiled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Circles,
    Squares,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandStyle {
    Rounded,
    Angular,
}

macro_rules! parse_enum {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($ty),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

parse_enum!(BackgroundStyle, "flat" => BackgroundStyle::Flat, "gradient" => BackgroundStyle::Gradient, "tiled" => BackgroundStyle::Tiled);
parse_enum!(ShapeFamily, "circles" => ShapeFamily::Circles, "squares" => ShapeFamily::Squares, "mixed" => ShapeFamily::Mixed);
parse_enum!(HandStyle, "rounded" => HandStyle::Rounded, "angular" => HandStyle::Angular);

/// Generator parameters of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub background_style: BackgroundStyle,
    pub background_seed: u64,
    pub object_shape_family: ShapeFamily,
    pub palette_seed: u64,
    /// Multiplicative brightness, in `[0.5, 1.5]`.
    pub illumination_gain: f64,
    /// Std of additive Gaussian noise in `[0, 1]` pixel units.
    pub sensor_noise_sigma: f64,
    pub hand_sprite_style: HandStyle,
    pub rng_seed: u64,
    /// Frames per clip.
    pub frames: usize,
    /// Frame height and width in pixels.
    pub size: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domain_id.is_empty() || self.domain_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid domain id `{}`", self.domain_id)));
        }
        if !(0.5..=1.5).contains(&self.illumination_gain) {
            return Err(Error::Config(format!("illumination_gain {} outside [0.5, 1.5]", self.illumination_gain)));
        }
        if !(self.sensor_noise_sigma >= 0.0 && self.sensor_noise_sigma.is_finite()) {
            return Err(Error::Config(format!("sensor_noise_sigma {} must be >= 0", self.sensor_noise_sigma)));
        }
        if self.frames < 2 {
            return Err(Error::Config("clips need at least 2 frames".into()));
        }
        if self.size < 16 || !self.size.is_multiple_of(16) {
            return Err(Error::Config(format!("frame size {} must be a positive multiple of 16", self.size)));
        }
        Ok(())
    }

    /// The source domain of the default study: flat background, round sprites.
    pub fn kitchen_a() -> Self {
        Self {
            domain_id: "kitchen_a".into(),
            background_style: BackgroundStyle::Flat,
            background_seed: 11,
            object_shape_family: ShapeFamily::Circles,
            palette_seed: 101,
            illumination_gain: 1.0,
            sensor_noise_sigma: 0.01,
            hand_sprite_style: HandStyle::Rounded,
            rng_seed: 1000,
            frames: 8,
            size: 64,
        }
    }

    /// The second domain of the default study: tiled background, square
    /// sprites, angular hands, dimmer and noisier.
    pub fn kitchen_b() -> Self {
        Self {
            domain_id: "kitchen_b".into(),
            background_style: BackgroundStyle::Tiled,
            background_seed: 29,
            object_shape_family: ShapeFamily::Squares,
            palette_seed: 202,
            illumination_gain: 0.8,
            sensor_noise_sigma: 0.05,
            hand_sprite_style: HandStyle::Angular,
            rng_seed: 2000,
            frames: 8,
            size: 64,
        }
    }

    pub fn palette(&self) -> Palette {
        Palette::from_seeds(self.palette_seed, self.background_seed)
    }
}

pub type Rgb = [f32; 3];

/// Colours used by a domain before illumination and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub hand: Rgb,
    pub objects: [Rgb; 4],
    pub background: [Rgb; 2],
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

impl Palette {
    pub fn from_seeds(palette_seed: u64, background_seed: u64) -> Self {
        use rand::Rng as _;
        let mut rng = crate::seed::rng(palette_seed, &[crate::seed::tag("palette")]);
        let hand = hsv(rng.random::<f64>(), rng.random_range(0.35..0.6), rng.random_range(0.75..0.95));
        let base = rng.random::<f64>();
        let mut objects = [[0.0; 3]; 4];
        for (k, o) in objects.iter_mut().enumerate() {
            *o = hsv(base + 0.25 * k as f64, rng.random_range(0.65..0.95), rng.random_range(0.55..0.9));
        }
        let mut brng = crate::seed::rng(background_seed, &[crate::seed::tag("background")]);
        let bh = brng.random::<f64>();
        let background = [
            hsv(bh, brng.random_range(0.1..0.3), brng.random_range(0.3..0.45)),
            hsv(bh + 0.5, brng.random_range(0.1..0.3), brng.random_range(0.5..0.65)),
        ];
        Self {
            hand,
            objects,
            background,
        }
    }

    pub fn colors(&self) -> Vec<Rgb> {
        let mut v = vec![self.hand];
        v.extend(self.objects);
        v.extend(self.background);
        v
    }
}

/// Role of an annotated sprite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "left-hand")]
    LeftHand,
    #[serde(rename = "right-hand")]
    RightHand,
    #[serde(rename = "object")]
    Object,
}

impl Role {
    pub fn is_hand(self) -> bool {
        matches!(self, Role::LeftHand | Role::RightHand)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub role: Role,
}

/// A rendered clip: `frames` is `T x H x W x 3`, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub action_label: usize,
    pub gt_boxes: Vec<Vec<GtBox>>,
}

impl VideoClip {
    pub fn frame_len(&self) -> usize {
        self.h * self.w * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn boxes(&self, t: usize) -> Vec<BBox> {
        self.gt_boxes[t].iter().map(|g| g.bbox).collect()
    }
}
