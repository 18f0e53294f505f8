//! Action vocabulary and per-frame sprite layouts.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HandStyle, Role, ShapeFamily};
use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 8;

pub const ACTION_NAMES: [&str; NUM_ACTIONS] = ["pick", "put", "cut", "stir", "pour", "open", "close", "wipe"];

/// Accepted range of the motion amplitude multiplier.
pub const SPEED_RANGE: (f64, f64) = (0.5, 2.0);

/// Continuous parameters of one performance of an action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// Motion amplitude multiplier.
    pub speed: f64,
    /// Work-surface location around which the action happens.
    pub anchor: (f64, f64),
    /// Horizontal side the hand approaches from, `+1` or `-1`.
    pub direction: f64,
    pub phase: f64,
    pub hand_radius: (f64, f64),
    pub object_radius: [f64; 2],
    pub object_color: [usize; 2],
    /// Square vs round per object; only consulted for mixed shape families.
    pub object_square: [bool; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action_label: usize,
    pub motion: MotionParams,
}

impl ActionSpec {
    pub fn sample<R: Rng>(action_label: usize, rng: &mut R) -> Self {
        let motion = MotionParams {
            speed: rng.random_range(0.8..1.2),
            anchor: (rng.random_range(0.35..0.65), rng.random_range(0.45..0.7)),
            direction: if rng.random::<bool>() { 1.0 } else { -1.0 },
            phase: rng.random_range(0.0..2.0 * PI),
            hand_radius: (rng.random_range(0.085..0.11), rng.random_range(0.075..0.1)),
            object_radius: [rng.random_range(0.055..0.08), rng.random_range(0.055..0.08)],
            object_color: [rng.random_range(0..4), rng.random_range(0..4)],
            object_square: [rng.random(), rng.random()],
        };
        Self { action_label, motion }
    }

    pub fn name(&self) -> &'static str {
        ACTION_NAMES[self.action_label]
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.motion;
        if self.action_label >= NUM_ACTIONS {
            return Err(Error::invalid(format!("action label {} >= {NUM_ACTIONS}", self.action_label)));
        }
        if !(SPEED_RANGE.0..=SPEED_RANGE.1).contains(&m.speed) {
            return Err(Error::invalid(format!(
                "speed {} outside [{}, {}] for action `{}`",
                m.speed,
                SPEED_RANGE.0,
                SPEED_RANGE.1,
                self.name()
            )));
        }
        let in_unit = |v: f64| (0.1..=0.9).contains(&v);
        if !in_unit(m.anchor.0) || !in_unit(m.anchor.1) {
            return Err(Error::invalid(format!("anchor {:?} outside [0.1, 0.9]^2", m.anchor)));
        }
        if m.direction.abs() != 1.0 {
            return Err(Error::invalid(format!("direction {} must be +1 or -1", m.direction)));
        }
        let radius_ok = |r: f64| (0.02..=0.2).contains(&r);
        if !radius_ok(m.hand_radius.0) || !radius_ok(m.hand_radius.1) || !m.object_radius.iter().all(|&r| radius_ok(r)) {
            return Err(Error::invalid("sprite radius outside [0.02, 0.2]"));
        }
        if m.object_color.iter().any(|&c| c >= 4) || !m.phase.is_finite() {
            return Err(Error::invalid("object colour index or phase out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpriteShape {
    Ellipse,
    Diamond,
    Rect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteColor {
    Hand,
    Object(usize),
}

/// A sprite in normalized coordinates: centre and half-extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    pub role: Role,
    pub shape: SpriteShape,
    pub color: SpriteColor,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Sprite {
    /// Whether the normalized point lies inside the sprite.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        match self.shape {
            SpriteShape::Ellipse => dx * dx + dy * dy <= 1.0,
            SpriteShape::Diamond => dx.abs() + dy.abs() <= 1.0,
            SpriteShape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }
}

fn smooth(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

struct Builder<'a> {
    m: &'a MotionParams,
    hand_style: HandStyle,
    family: ShapeFamily,
    objects: Vec<Sprite>,
    hands: Vec<Sprite>,
}

impl Builder<'_> {
    fn object(&mut self, k: usize, (x, y): (f64, f64), scale: f64) {
        let r = self.m.object_radius[k] * scale;
        let shape = match self.family {
            ShapeFamily::Circles => SpriteShape::Ellipse,
            ShapeFamily::Squares => SpriteShape::Rect,
            ShapeFamily::Mixed if self.m.object_square[k] => SpriteShape::Rect,
            ShapeFamily::Mixed => SpriteShape::Ellipse,
        };
        self.objects.push(Sprite {
            role: Role::Object,
            shape,
            color: SpriteColor::Object(self.m.object_color[k]),
            cx: x.clamp(r, 1.0 - r),
            cy: y.clamp(r, 1.0 - r),
            rx: r,
            ry: r,
        });
    }

    fn hand(&mut self, role: Role, (x, y): (f64, f64)) {
        let (rx, ry) = self.m.hand_radius;
        let shape = match self.hand_style {
            HandStyle::Rounded => SpriteShape::Ellipse,
            HandStyle::Angular => SpriteShape::Diamond,
        };
        self.hands.push(Sprite {
            role,
            shape,
            color: SpriteColor::Hand,
            cx: x.clamp(rx, 1.0 - rx),
            cy: y.clamp(ry, 1.0 - ry),
            rx,
            ry,
        });
    }
}

fn add(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 + b.0, a.1 + b.1)
}

fn lerp(a: (f64, f64), b: (f64, f64), u: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u)
}

/// Sprites of frame `t` of `frames`, in draw order (objects, then hands).
pub fn layout(action: &ActionSpec, t: usize, frames: usize, hand_style: HandStyle, family: ShapeFamily) -> Vec<Sprite> {
    let m = &action.motion;
    let u = t as f64 / (frames - 1) as f64;
    let s = m.speed;
    let dir = m.direction;
    let a = m.anchor;
    let mut b = Builder {
        m,
        hand_style,
        family,
        objects: Vec::new(),
        hands: Vec::new(),
    };
    match action.action_label {
        // pick: reach the object, then lift it
        0 => {
            let lift = 0.3 * s * ((u - 0.4) / 0.6).max(0.0);
            let obj = (a.0, a.1 - lift);
            let grip = add(obj, (0.0, -0.03));
            let start = add(a, (0.28 * dir * s, -0.12));
            let hand = if u < 0.4 { lerp(start, grip, smooth(u / 0.4)) } else { grip };
            b.object(0, obj, 1.0);
            b.hand(Role::RightHand, hand);
        }
        // put: lower the object, then withdraw
        1 => {
            let drop = 0.3 * s * (1.0 - (u / 0.5).min(1.0));
            let obj = (a.0, a.1 - drop);
            let grip = add(obj, (0.0, -0.03));
            let away = add(add(a, (0.0, -0.03)), (0.28 * dir * s, -0.12));
            let hand = if u <= 0.5 { grip } else { lerp(grip, away, smooth((u - 0.5) / 0.5)) };
            b.object(0, obj, 1.0);
            b.hand(Role::RightHand, hand);
        }
        // cut: one hand holds, the other chops fast
        2 => {
            let chop = 0.08 * s * (PI * 3.0 * u + m.phase).sin().abs();
            b.object(0, a, 1.0);
            b.hand(Role::LeftHand, add(a, (-0.09, 0.02)));
            b.hand(Role::RightHand, add(a, (0.08, -0.11 + chop)));
        }
        // stir: circle over a large pot
        3 => {
            let theta = m.phase + dir * 2.0 * PI * 1.25 * u;
            let r = 0.08 * s;
            b.object(0, a, 1.3);
            b.hand(Role::RightHand, add(a, (r * theta.cos(), r * theta.sin())));
        }
        // pour: carry a cup over a bowl and tip it
        4 => {
            let start = add(a, (0.3 * dir * s, -0.2));
            let over = add(a, (0.05 * dir, -0.12));
            let mut hand = lerp(start, over, smooth(u / 0.45));
            hand.0 += 0.02 * (2.0 * PI * 2.0 * u).sin();
            b.object(0, a, 1.0);
            b.object(1, add(hand, (0.0, 0.04)), 0.8);
            b.hand(Role::RightHand, hand);
        }
        // open: hold the jar, take the lid away
        5 => {
            let off = smooth(u);
            b.object(0, a, 1.0);
            b.hand(Role::LeftHand, add(a, (-0.09, 0.03)));
            b.hand(Role::RightHand, add(a, (0.04 + 0.22 * s * off, -0.08 - 0.12 * s * off)));
        }
        // close: hold the jar, bring the lid back
        6 => {
            let off = smooth(1.0 - u);
            b.object(0, a, 1.0);
            b.hand(Role::LeftHand, add(a, (-0.09, 0.03)));
            b.hand(Role::RightHand, add(a, (0.04 + 0.22 * s * off, -0.08 - 0.12 * s * off)));
        }
        // wipe: wide sweeps, nothing held
        7 => {
            let ph = 2.0 * PI * 1.5 * u + m.phase;
            b.hand(Role::RightHand, add(a, (0.25 * s * ph.sin(), 0.03 * (2.0 * ph).sin())));
        }
        _ => unreachable!("validated action label"),
    }
    let mut out = b.objects;
    out.extend(b.hands);
    out
}
