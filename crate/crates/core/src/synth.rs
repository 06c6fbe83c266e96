//! Procedural toy faces. Each identity has fixed geometry and colouring; age
//! changes head size, hair greying, hairline and wrinkles. Used to build the
//! committed fixture and in tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::io::write_atomic;
use crate::prompts::AgeGroup;
use crate::tensor::ImageTensor;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FaceIdentity {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub face_width: f64,
    pub face_height: f64,
    pub eye_separation: f64,
    pub eye_height: f64,
    pub eye_size: f64,
    pub brow_tilt: f64,
    pub nose_length: f64,
    pub mouth_width: f64,
    pub hair_style: u8,
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|v| v * s)
}

impl FaceIdentity {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let tone = rng.random_range(0.25..1.0);
        let skin = mix([0.36, 0.22, 0.14], [0.96, 0.80, 0.68], tone);
        let hair_palette = [
            [0.08, 0.06, 0.05],
            [0.30, 0.18, 0.08],
            [0.55, 0.35, 0.15],
            [0.85, 0.70, 0.35],
            [0.60, 0.20, 0.08],
        ];
        let iris_palette = [[0.15, 0.35, 0.70], [0.30, 0.18, 0.08], [0.20, 0.50, 0.25], [0.10, 0.08, 0.06]];
        let hair = hair_palette[rng.random_range(0..hair_palette.len())];
        let iris = iris_palette[rng.random_range(0..iris_palette.len())];
        Self {
            skin,
            hair: mix(hair, [rng.random(), rng.random(), rng.random()], 0.15),
            iris,
            lips: mix(skin, [0.75, 0.25, 0.30], rng.random_range(0.35..0.7)),
            face_width: rng.random_range(0.50..0.66),
            face_height: rng.random_range(0.66..0.82),
            eye_separation: rng.random_range(0.17..0.29),
            eye_height: rng.random_range(-0.16..-0.02),
            eye_size: rng.random_range(0.065..0.10),
            brow_tilt: rng.random_range(-0.25..0.25),
            nose_length: rng.random_range(0.10..0.24),
            mouth_width: rng.random_range(0.12..0.26),
            hair_style: rng.random_range(0..3),
        }
    }

    /// Renders the identity at `age` years. `rng` drives per-image jitter
    /// (pose shift, lighting, background, sensor noise).
    pub fn render<R: Rng + ?Sized>(&self, age: f64, resolution: usize, rng: &mut R) -> ImageTensor {
        let growth = (0.72 + 0.28 * (age / 20.0).min(1.0)).min(1.0);
        let grey = ((age - 32.0) / 40.0).clamp(0.0, 1.0);
        let wrinkle = ((age - 40.0) / 30.0).clamp(0.0, 1.0);
        let recede = ((age - 45.0) / 35.0).clamp(0.0, 1.0) * 0.18;
        let child_eyes = 1.0 + 0.45 * (1.0 - (age / 15.0).min(1.0));
        let hair = mix(self.hair, [0.86, 0.86, 0.88], grey);
        let skin = mix(self.skin, scale(self.skin, 0.88), wrinkle);

        let dx = rng.random_range(-0.05..0.05);
        let dy = rng.random_range(-0.05..0.05);
        let light = rng.random_range(0.92..1.08);
        let backdrop = rng.random_range(0.55..0.75);
        let bg = [0, 1, 2].map(|_| backdrop + rng.random_range(-0.05..0.05));
        let noise = Normal::new(0.0, 0.015).expect("valid std");

        let fw = self.face_width * growth;
        let fh = self.face_height * growth;
        let cy = 0.12 + (1.0 - growth) * 0.25;
        let eye_y = cy + self.eye_height * growth + (1.0 - growth) * 0.08;
        let eye_r = self.eye_size * child_eyes * growth.sqrt();
        let eye_sep = self.eye_separation * growth;
        let mouth_y = cy + 0.42 * fh;
        let hairline = cy - fh * (0.62 - recede);

        let hi = resolution * SUPERSAMPLE;
        let mut acc = vec![0.0; 3 * resolution * resolution];
        for py in 0..hi {
            for px in 0..hi {
                let u = (px as f64 + 0.5) / hi as f64 * 2.0 - 1.0 - dx;
                let v = (py as f64 + 0.5) / hi as f64 * 2.0 - 1.0 - dy;
                let mut c = bg;
                let face = (u / fw).powi(2) + ((v - cy) / fh).powi(2);
                let hair_outer = (u / (fw * 1.12)).powi(2) + ((v - cy + 0.06) / (fh * 1.1)).powi(2);
                let long_hair = self.hair_style == 1 && u.abs() < fw * 1.25 && v > cy - 0.1 && v < cy + fh * 0.9;
                if hair_outer <= 1.0 && v < cy || long_hair {
                    c = hair;
                }
                if face <= 1.0 {
                    let shade = 1.0 - 0.18 * face;
                    c = scale(skin, shade);
                    let bangs = self.hair_style == 2 && v < hairline + 0.12 && u > -fw * 0.2;
                    if v < hairline || bangs {
                        c = hair;
                    }
                    // Forehead and cheek lines.
                    if wrinkle > 0.0 {
                        for k in 0..3 {
                            let wy = hairline + 0.08 + 0.055 * k as f64;
                            if (v - wy).abs() < 0.011 && u.abs() < fw * 0.5 && v > hairline {
                                c = mix(c, scale(skin, 0.55), wrinkle * 0.9);
                            }
                        }
                        for side in [-1.0, 1.0] {
                            let lx = side * (self.mouth_width * 0.9 + 0.05 * (v - mouth_y + 0.12));
                            if (u - lx).abs() < 0.012 && v > mouth_y - 0.16 && v < mouth_y + 0.02 {
                                c = mix(c, scale(skin, 0.6), wrinkle * 0.8);
                            }
                        }
                    }
                    for side in [-1.0, 1.0] {
                        let ex = side * eye_sep;
                        let e = ((u - ex) / (eye_r * 1.4)).powi(2) + ((v - eye_y) / eye_r).powi(2);
                        if e <= 1.0 {
                            c = [0.95, 0.95, 0.93];
                            if ((u - ex).powi(2) + (v - eye_y).powi(2)).sqrt() < eye_r * 0.6 {
                                c = self.iris;
                            }
                        }
                        let brow_y = eye_y - eye_r * 1.9 + side * self.brow_tilt * (u - ex);
                        if (v - brow_y).abs() < 0.02 + 0.01 * (1.0 - grey) && (u - ex).abs() < eye_r * 1.7 {
                            c = hair;
                        }
                    }
                    let nose_top = eye_y + 0.02;
                    if u.abs() < 0.02 && v > nose_top && v < nose_top + self.nose_length * growth {
                        c = scale(skin, 0.75);
                    }
                    let m = (u / (self.mouth_width * growth)).powi(2) + ((v - mouth_y) / 0.035).powi(2);
                    if m <= 1.0 {
                        c = self.lips;
                    }
                }
                let (ox, oy) = (px / SUPERSAMPLE, py / SUPERSAMPLE);
                for ch in 0..3 {
                    acc[ch * resolution * resolution + oy * resolution + ox] += c[ch];
                }
            }
        }
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let data = acc
            .into_iter()
            .map(|v| (v / n * light + noise.sample(rng)).clamp(0.0, 1.0))
            .collect();
        ImageTensor::from_chw(data, resolution, resolution).expect("buffer length matches")
    }
}

/// Representative age in years for a group, with a little spread.
pub fn sample_age<R: Rng + ?Sized>(group: AgeGroup, rng: &mut R) -> f64 {
    let (lo, hi) = group.interval();
    let hi = if hi.is_finite() { hi } else { 85.0 };
    let lo = lo.max(4.0);
    rng.random_range(lo + 0.15 * (hi - lo)..hi - 0.15 * (hi - lo))
}

/// Sizes of the generated toy fixture.
#[derive(Debug, Clone, Serialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub resolution: usize,
    pub target_images: usize,
    pub target_group: AgeGroup,
    pub reg_subjects: usize,
    pub reg_per_group: usize,
    pub pretrain_subjects: usize,
    pub pretrain_images: usize,
    pub finetune_subjects: usize,
    pub finetune_per_group: usize,
    pub eval_subjects: usize,
    pub eval_ori: usize,
    pub eval_mod: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            resolution: 32,
            target_images: 20,
            target_group: AgeGroup::YoungAdults,
            reg_subjects: 48,
            reg_per_group: 16,
            pretrain_subjects: 24,
            pretrain_images: 4,
            finetune_subjects: 16,
            finetune_per_group: 2,
            eval_subjects: 12,
            eval_ori: 2,
            eval_mod: 3,
        }
    }
}

fn save(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.to_rgb()?
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}

/// Writes the toy fixture under `root`:
///
/// - `subjects/target/NN.png`: the fine-tuning subject at one age group
/// - `reg/<group>/<subject>_N.png`: captioned regularization images
/// - `matcher/pretrain/<subject>/N.png`: single-age images for the matcher
/// - `matcher/finetune/<subject>/N.png`: multi-age images of other subjects
/// - `eval/ori/<subject>/N.png` and `eval/mod/<subject>/N.png`: held-out
///   subjects at the target age and at other ages
/// - `manifest.json` for the training subject
///
/// Every subject id is unique across the sections.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let res = spec.resolution;
    let target = FaceIdentity::random(&mut rng);
    let mut images = Vec::new();
    for i in 0..spec.target_images {
        let age = sample_age(spec.target_group, &mut rng);
        images.push(format!("subjects/target/{i:02}.png"));
        save(&target.render(age, res, &mut rng), &root.join(images.last().unwrap()))?;
    }

    let reg_ids: Vec<FaceIdentity> = (0..spec.reg_subjects).map(|_| FaceIdentity::random(&mut rng)).collect();
    let mut regularization = Vec::new();
    let mut counter = vec![0usize; spec.reg_subjects];
    for (gi, group) in AgeGroup::ALL.iter().enumerate() {
        let members: Vec<usize> = (0..spec.reg_subjects)
            .filter(|k| k % 6 == gi || (k + 3) % 6 == gi)
            .take(spec.reg_per_group)
            .collect();
        for k in members {
            let rel = format!("reg/{}/r{k:02}_{}.png", group.word(), counter[k]);
            counter[k] += 1;
            let age = sample_age(*group, &mut rng);
            save(&reg_ids[k].render(age, res, &mut rng), &root.join(&rel))?;
            regularization.push(serde_json::json!({
                "path": rel, "caption": group.word(), "subject_id": format!("r{k:02}")
            }));
        }
    }

    for s in 0..spec.pretrain_subjects {
        let id = FaceIdentity::random(&mut rng);
        for n in 0..spec.pretrain_images {
            let age = sample_age(spec.target_group, &mut rng);
            save(&id.render(age, res, &mut rng), &root.join(format!("matcher/pretrain/p{s:02}/{n}.png")))?;
        }
    }
    for s in 0..spec.finetune_subjects {
        let id = FaceIdentity::random(&mut rng);
        let mut n = 0;
        for group in AgeGroup::ALL {
            for _ in 0..spec.finetune_per_group {
                let age = sample_age(group, &mut rng);
                save(&id.render(age, res, &mut rng), &root.join(format!("matcher/finetune/f{s:02}/{n:02}.png")))?;
                n += 1;
            }
        }
    }
    let others: Vec<AgeGroup> = AgeGroup::ALL.into_iter().filter(|g| *g != spec.target_group).collect();
    for s in 0..spec.eval_subjects {
        let id = FaceIdentity::random(&mut rng);
        for n in 0..spec.eval_ori {
            let age = sample_age(spec.target_group, &mut rng);
            save(&id.render(age, res, &mut rng), &root.join(format!("eval/ori/e{s:02}/{n}.png")))?;
        }
        for n in 0..spec.eval_mod {
            let group = others[rng.random_range(0..others.len())];
            let age = sample_age(group, &mut rng);
            save(&id.render(age, res, &mut rng), &root.join(format!("eval/mod/e{s:02}/{n}.png")))?;
        }
    }

    let manifest = serde_json::json!({
        "training": {"subject_id": "target", "images": images},
        "regularization": regularization,
    });
    write_atomic(&root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_atomic(&root.join("fixture.json"), serde_json::to_string_pretty(spec)?.as_bytes())?;
    Ok(())
}
