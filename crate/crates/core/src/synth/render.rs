use rand_distr::{Distribution, StandardNormal};

use super::scene::{layout, ActionSpec, Sprite, SpriteColor};
use super::{BackgroundStyle, DomainSpec, GtBox, Palette, Rgb, Role, VideoClip};
use crate::boxes::BBox;
use crate::error::Result;
use crate::seed;

fn background_color(style: BackgroundStyle, pal: &Palette, x: usize, y: usize, size: usize) -> Rgb {
    match style {
        BackgroundStyle::Flat => pal.background[0],
        BackgroundStyle::Gradient => {
            let f = y as f32 / (size - 1) as f32;
            let [a, b] = pal.background;
            [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, a[2] + (b[2] - a[2]) * f]
        }
        BackgroundStyle::Tiled => {
            let tile = (size / 8).max(1);
            pal.background[(x / tile + y / tile) % 2]
        }
    }
}

/// Pixel mask of a sprite on a `size x size` raster: a pixel belongs to the
/// sprite when its centre does.
pub fn render_sprite_mask(sprite: &Sprite, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let n = size as f64;
    let x0 = ((sprite.cx - sprite.rx) * n).floor().max(0.0) as usize;
    let x1 = (((sprite.cx + sprite.rx) * n).ceil() as usize).min(size);
    let y0 = ((sprite.cy - sprite.ry) * n).floor().max(0.0) as usize;
    let y1 = (((sprite.cy + sprite.ry) * n).ceil() as usize).min(size);
    for py in y0..y1 {
        for px in x0..x1 {
            if sprite.contains((px as f64 + 0.5) / n, (py as f64 + 0.5) / n) {
                mask[py * size + px] = true;
            }
        }
    }
    mask
}

fn tight_box(mask: &[bool], size: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % size, i / size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if x0 == usize::MAX {
        return None;
    }
    let n = size as f64;
    BBox::new(x0 as f64 / n, y0 as f64 / n, (x1 + 1) as f64 / n, (y1 + 1) as f64 / n).ok()
}

fn role_rank(r: Role) -> u8 {
    match r {
        Role::LeftHand => 0,
        Role::RightHand => 1,
        Role::Object => 2,
    }
}

/// Renders one clip. Boxes are listed hands first (left, right), then
/// objects, and bound each sprite's full rasterized extent.
pub fn render_clip(spec: &DomainSpec, action: &ActionSpec, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    action.validate()?;
    let (t_len, size) = (spec.frames, spec.size);
    let pal = spec.palette();
    let frame_len = size * size * 3;
    let mut frames = vec![0.0f32; t_len * frame_len];
    let mut gt_boxes = Vec::with_capacity(t_len);
    let gain = spec.illumination_gain as f32;
    let sigma = spec.sensor_noise_sigma;

    for t in 0..t_len {
        let frame = &mut frames[t * frame_len..(t + 1) * frame_len];
        for y in 0..size {
            for x in 0..size {
                let c = background_color(spec.background_style, &pal, x, y, size);
                frame[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&c);
            }
        }
        let mut boxes = Vec::new();
        for sprite in layout(action, t, t_len, spec.hand_sprite_style, spec.object_shape_family) {
            let color = match sprite.color {
                SpriteColor::Hand => pal.hand,
                SpriteColor::Object(k) => pal.objects[k],
            };
            let mask = render_sprite_mask(&sprite, size);
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                frame[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
            if let Some(bbox) = tight_box(&mask, size) {
                boxes.push(GtBox { bbox, role: sprite.role });
            }
        }
        boxes.sort_by_key(|b| role_rank(b.role));
        gt_boxes.push(boxes);

        let mut rng = seed::rng(seed, &[seed::tag("noise"), t as u64]);
        for v in frame.iter_mut() {
            let mut p = *v * gain;
            if sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                p += (sigma * n) as f32;
            }
            *v = p.clamp(0.0, 1.0);
        }
    }

    Ok(VideoClip {
        clip_id: format!("{}-{}-{:016x}", spec.domain_id, action.name(), seed),
        frames,
        t: t_len,
        h: size,
        w: size,
        action_label: action.action_label,
        gt_boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::iou;
    use crate::synth::scene::NUM_ACTIONS;

    fn clip(spec: &DomainSpec, label: usize, s: u64) -> VideoClip {
        let mut rng = seed::rng(s, &[]);
        render_clip(spec, &ActionSpec::sample(label, &mut rng), s).unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = DomainSpec::kitchen_b();
        assert_eq!(clip(&spec, 0, 7), clip(&spec, 0, 7));
        assert_ne!(clip(&spec, 0, 7).frames, clip(&spec, 0, 8).frames);
    }

    #[test]
    fn noiseless_flat_background_is_exact_outside_sprites() {
        let mut spec = DomainSpec::kitchen_a();
        spec.sensor_noise_sigma = 0.0;
        spec.illumination_gain = 1.2;
        let pal = spec.palette();
        let bg: Vec<f32> = pal.background[0].iter().map(|c| (c * 1.2).clamp(0.0, 1.0)).collect();
        let mut rng = seed::rng(5, &[]);
        let action = ActionSpec::sample(4, &mut rng);
        let c = render_clip(&spec, &action, 5).unwrap();
        for t in 0..c.t {
            let sprites = layout(&action, t, c.t, spec.hand_sprite_style, spec.object_shape_family);
            let covered: Vec<bool> = (0..c.h * c.w)
                .map(|i| sprites.iter().any(|s| render_sprite_mask(s, c.h)[i]))
                .collect();
            for (i, px) in c.frame(t).chunks(3).enumerate() {
                if !covered[i] {
                    assert_eq!(px, &bg[..]);
                }
            }
        }
    }

    #[test]
    fn pixels_and_box_counts_are_in_range() {
        for spec in [DomainSpec::kitchen_a(), DomainSpec::kitchen_b()] {
            for label in 0..NUM_ACTIONS {
                let c = clip(&spec, label, 40 + label as u64);
                assert!(c.frames.iter().all(|v| (0.0..=1.0).contains(v)));
                for boxes in &c.gt_boxes {
                    assert!((1..=4).contains(&boxes.len()));
                    assert!(boxes.iter().any(|b| b.role.is_hand()));
                }
            }
        }
    }

    #[test]
    fn handled_objects_touch_a_hand_in_half_the_frames() {
        for s in 0..40u64 {
            for label in 0..NUM_ACTIONS {
                let c = clip(&DomainSpec::kitchen_a(), label, 1000 + s);
                let n_objects = c.gt_boxes[0].iter().filter(|b| b.role == Role::Object).count();
                for k in 0..n_objects {
                    let touching = c
                        .gt_boxes
                        .iter()
                        .filter(|frame| {
                            let obj = frame.iter().filter(|b| b.role == Role::Object).nth(k).unwrap();
                            frame.iter().filter(|b| b.role.is_hand()).any(|h| iou(&h.bbox, &obj.bbox) > 0.0)
                        })
                        .count();
                    assert!(2 * touching >= c.t, "action {label} object {k}: {touching} frames");
                }
            }
        }
    }
}
