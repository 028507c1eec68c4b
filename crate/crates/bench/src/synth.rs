//! Deterministic synthetic sequences with exact ground truth.
//!
//! A scenario scripts a textured square target over a noisy background:
//! constant velocity, geometric scale drift, an opaque occluder that covers
//! a fraction of the target for a span of frames, an illumination gain
//! ramp, and an optional static distractor square. Rendering is seeded and
//! bit-reproducible; ground-truth boxes come from the script, not from the
//! rendering.

use mbcf_core::{BoundingBox, Frame};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::sequence::{FrameStore, Sequence};
use crate::{BenchError, Result};

/// Occluder script: an opaque block covering `coverage` of the target area,
/// centered on the target, during `[start, start + duration)`.
#[derive(Debug, Clone, Serialize)]
pub struct OcclusionScript {
    pub start: usize,
    pub duration: usize,
    pub coverage: f64,
}

/// A static textured square somewhere else in the scene.
#[derive(Debug, Clone, Serialize)]
pub struct DistractorSpec {
    pub center: (f64, f64),
    pub size: f64,
    pub seed: u64,
}

/// Full scenario description.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub frame_size: (usize, usize),
    pub frames: usize,
    /// Target square edge at frame 0, pixels.
    pub target_size: f64,
    /// Target center at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Per-frame size multiplier.
    pub scale_rate: f64,
    pub texture_seed: u64,
    /// Uniform background noise amplitude.
    pub noise_level: f64,
    /// Per-frame multiplicative illumination ramp; gain = 1 + ramp * t.
    pub illumination_ramp: f64,
    pub occlusion: Option<OcclusionScript>,
    pub distractor: Option<DistractorSpec>,
}

impl ScenarioSpec {
    fn truth_at(&self, t: usize) -> BoundingBox {
        let c = (
            self.start.0 + self.velocity.0 * t as f64,
            self.start.1 + self.velocity.1 * t as f64,
        );
        let size = self.target_size * self.scale_rate.powi(t as i32);
        BoundingBox::from_center(c, size, size)
    }
}

fn texture(seed: u64, texels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..texels * texels).map(|_| rng.gen_range(0.2..1.0)).collect()
}

fn sample_texture(tex: &[f64], texels: usize, x: f64, y: f64) -> f64 {
    let clamp = |v: f64| v.clamp(0.0, texels as f64 - 1.0);
    let u = clamp(x - 0.5);
    let v = clamp(y - 0.5);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(texels - 1);
    let y1 = (y0 + 1).min(texels - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let top = tex[y0 * texels + x0] * (1.0 - fx) + tex[y0 * texels + x1] * fx;
    let bot = tex[y1 * texels + x0] * (1.0 - fx) + tex[y1 * texels + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn paint_square(frame: &mut Frame, tex: &[f64], texels: usize, rect: BoundingBox) {
    let x_lo = rect.x.max(0.0) as usize;
    let y_lo = rect.y.max(0.0) as usize;
    let x_hi = ((rect.x + rect.w).ceil() as usize).min(frame.width());
    let y_hi = ((rect.y + rect.h).ceil() as usize).min(frame.height());
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if px >= rect.x && px < rect.x + rect.w && py >= rect.y && py < rect.y + rect.h {
                let tx = (px - rect.x) / rect.w * texels as f64;
                let ty = (py - rect.y) / rect.h * texels as f64;
                frame.set_pixel(x, y, sample_texture(tex, texels, tx, ty));
            }
        }
    }
}

fn paint_block(frame: &mut Frame, rect: BoundingBox, value: f64) {
    let x_lo = rect.x.max(0.0) as usize;
    let y_lo = rect.y.max(0.0) as usize;
    let x_hi = ((rect.x + rect.w).ceil() as usize).min(frame.width());
    let y_hi = ((rect.y + rect.h).ceil() as usize).min(frame.height());
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if px >= rect.x && px < rect.x + rect.w && py >= rect.y && py < rect.y + rect.h {
                frame.set_pixel(x, y, value);
            }
        }
    }
}

const TEXTURE_TEXELS: usize = 10;
const BACKGROUND: f64 = 0.45;
const OCCLUDER_VALUE: f64 = 0.12;

/// Renders the scenario into frames plus exact ground truth. Errors when
/// the scripted target ever leaves the frame.
pub fn synth_sequence(spec: &ScenarioSpec) -> Result<Sequence> {
    if spec.frames == 0 {
        return Err(BenchError::Input("scenario needs at least one frame".into()));
    }
    if spec.target_size < 4.0 || spec.target_size.is_nan() {
        return Err(BenchError::Input("target must be at least 4 px".into()));
    }
    let (fw, fh) = spec.frame_size;
    let tex = texture(spec.texture_seed, TEXTURE_TEXELS);
    let distractor_tex = spec
        .distractor
        .as_ref()
        .map(|d| texture(d.seed, TEXTURE_TEXELS));

    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let rect = spec.truth_at(t);
        if rect.x < 0.0
            || rect.y < 0.0
            || rect.x + rect.w > fw as f64
            || rect.y + rect.h > fh as f64
        {
            return Err(BenchError::Input(format!(
                "scenario {}: target leaves the frame at t={t} ({rect:?})",
                spec.name
            )));
        }

        let mut frame = Frame::filled(fw, fh, BACKGROUND);
        if spec.noise_level > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(spec.texture_seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for v in frame.data_mut() {
                *v += rng.gen_range(-spec.noise_level..spec.noise_level);
            }
        }
        if let (Some(d), Some(dtex)) = (&spec.distractor, &distractor_tex) {
            paint_square(
                &mut frame,
                dtex,
                TEXTURE_TEXELS,
                BoundingBox::from_center(d.center, d.size, d.size),
            );
        }
        paint_square(&mut frame, &tex, TEXTURE_TEXELS, rect);
        if let Some(occ) = &spec.occlusion {
            if t >= occ.start && t < occ.start + occ.duration {
                // A full-height bar (pillar) covering `coverage` of the
                // target area; width rides the scripted box.
                let block = BoundingBox {
                    x: rect.center().0 - rect.w * occ.coverage / 2.0,
                    y: 0.0,
                    w: rect.w * occ.coverage,
                    h: fh as f64,
                };
                paint_block(&mut frame, block, OCCLUDER_VALUE);
            }
        }
        if spec.illumination_ramp != 0.0 {
            let gain = 1.0 + spec.illumination_ramp * t as f64;
            for v in frame.data_mut() {
                *v *= gain;
            }
        }
        for v in frame.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        frames.push(frame);
        truth.push(rect);
    }

    let mut attributes = Vec::new();
    if spec.velocity != (0.0, 0.0) {
        attributes.push("motion".to_string());
    }
    if spec.scale_rate != 1.0 {
        attributes.push("scale-variation".to_string());
    }
    if spec.occlusion.is_some() {
        attributes.push("occlusion".to_string());
    }
    if spec.illumination_ramp != 0.0 {
        attributes.push("illumination".to_string());
    }
    Ok(Sequence {
        name: spec.name.clone(),
        frames: FrameStore::Memory(frames),
        truth,
        attributes,
    })
}

/// Named scenario presets used by the CLI and the acceptance suite.
pub fn scenario_preset(name: &str, seed: u64) -> Result<ScenarioSpec> {
    match name {
        "static" => Ok(ScenarioSpec {
            name: "static".into(),
            frame_size: (160, 160),
            frames: 30,
            target_size: 40.0,
            start: (80.0, 80.0),
            velocity: (0.0, 0.0),
            scale_rate: 1.0,
            texture_seed: seed,
            noise_level: 0.02,
            illumination_ramp: 0.0,
            occlusion: None,
            distractor: None,
        }),
        "constant-velocity" => Ok(ScenarioSpec {
            name: "constant-velocity".into(),
            frame_size: (420, 120),
            frames: 100,
            target_size: 40.0,
            start: (30.0, 60.0),
            velocity: (3.0, 0.0),
            scale_rate: 1.0,
            texture_seed: seed,
            noise_level: 0.05,
            illumination_ramp: 0.0,
            occlusion: None,
            distractor: None,
        }),
        "scale-drift" => Ok(ScenarioSpec {
            name: "scale-drift".into(),
            frame_size: (300, 300),
            frames: 41,
            target_size: 40.0,
            start: (150.0, 150.0),
            velocity: (0.0, 0.0),
            scale_rate: 1.03,
            texture_seed: seed,
            noise_level: 0.02,
            illumination_ramp: 0.0,
            occlusion: None,
            distractor: None,
        }),
        "occlusion" => Ok(ScenarioSpec {
            name: "occlusion".into(),
            frame_size: (400, 120),
            frames: 70,
            target_size: 36.0,
            start: (30.0, 60.0),
            velocity: (4.5, 0.0),
            scale_rate: 1.0,
            texture_seed: seed,
            noise_level: 0.05,
            illumination_ramp: 0.0,
            occlusion: Some(OcclusionScript { start: 40, duration: 10, coverage: 1.0 }),
            distractor: None,
        }),
        other => Err(BenchError::Input(format!(
            "unknown scenario {other:?}; expected static, constant-velocity, scale-drift, or occlusion"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> ScenarioSpec {
        ScenarioSpec {
            name: "test".into(),
            frame_size: (120, 100),
            frames: 5,
            target_size: 20.0,
            start: (60.0, 50.0),
            velocity: (0.0, 0.0),
            scale_rate: 1.0,
            texture_seed: 9,
            noise_level: 0.03,
            illumination_ramp: 0.0,
            occlusion: None,
            distractor: None,
        }
    }

    #[test]
    fn zero_velocity_keeps_every_box_identical() {
        let seq = synth_sequence(&base_spec()).unwrap();
        for b in &seq.truth {
            assert_eq!(*b, seq.truth[0]);
        }
    }

    #[test]
    fn scale_rate_compounds_geometrically() {
        let mut spec = base_spec();
        spec.frame_size = (300, 300);
        spec.start = (150.0, 150.0);
        spec.scale_rate = 1.03;
        spec.frames = 11;
        let seq = synth_sequence(&spec).unwrap();
        let ratio = seq.truth[10].w / seq.truth[0].w;
        assert!((ratio - 1.03f64.powi(10)).abs() < 1e-9);
        assert!((ratio - 1.3439).abs() < 1e-3);
    }

    #[test]
    fn full_occlusion_leaves_no_target_pixels_in_the_box() {
        let mut spec = base_spec();
        spec.frames = 12;
        spec.occlusion = Some(OcclusionScript { start: 4, duration: 3, coverage: 1.0 });
        let seq = synth_sequence(&spec).unwrap();
        for t in 4..7 {
            let frame = seq.frame(t).unwrap();
            let b = seq.truth[t];
            for y in b.y.ceil() as usize..(b.y + b.h).floor() as usize {
                for x in b.x.ceil() as usize..(b.x + b.w).floor() as usize {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    if px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h {
                        assert_eq!(frame.pixel(x, y), OCCLUDER_VALUE, "target pixel at ({x},{y}) frame {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_bit_identical_across_calls() {
        let spec = base_spec();
        let a = synth_sequence(&spec).unwrap();
        let b = synth_sequence(&spec).unwrap();
        for t in 0..spec.frames {
            let fa = a.frame(t).unwrap();
            let fb = b.frame(t).unwrap();
            assert_eq!(fa.data(), fb.data());
        }
    }

    #[test]
    fn escaping_target_is_a_scenario_error() {
        let mut spec = base_spec();
        spec.velocity = (50.0, 0.0);
        spec.frames = 10;
        match synth_sequence(&spec) {
            Err(BenchError::Input(msg)) => assert!(msg.contains("leaves the frame")),
            other => panic!("expected scenario error, got {other:?}"),
        }
    }

    #[test]
    fn presets_materialize() {
        for name in ["static", "constant-velocity", "scale-drift", "occlusion"] {
            let spec = scenario_preset(name, 5).unwrap();
            let seq = synth_sequence(&spec).unwrap();
            assert_eq!(seq.len(), spec.frames);
        }
        assert!(scenario_preset("nope", 1).is_err());
    }
}
