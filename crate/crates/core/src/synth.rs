//! Synthetic scene generation: textured ellipse-pair faces with attached
//! body regions, optional occlusion bands, and face-like / body-like
//! distractors, rendered to PGM with paired annotation files.

use crate::boxes::{decode_deltas, Bbox};
use crate::config::Config;
use crate::dataset::{write_annotations, Annotation};
use crate::error::{Error, Result};
use crate::pgm::{write_pgm, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One rendered scene plus its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: GrayImage,
    pub faces: Vec<Bbox>,
    pub bodies: Vec<Bbox>,
    pub occlusion: Vec<f32>,
}

/// Stable per-image stream: mixes (seed, split, index) so regenerating any
/// single image reproduces it bit for bit.
pub fn derive_rng(seed: u64, split: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(&seed.to_le_bytes());
    eat(split.as_bytes());
    eat(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(h)
}

fn fill_ellipse(img: &mut GrayImage, bbox: &Bbox, mut shade: impl FnMut(f32, f32, u8) -> u8) {
    let (x1, y1, x2, y2) = bbox.corners();
    let (rx, ry) = (bbox.w / 2.0, bbox.h / 2.0);
    if rx <= 0.0 || ry <= 0.0 {
        return;
    }
    let xs = x1.floor().max(0.0) as usize;
    let ys = y1.floor().max(0.0) as usize;
    let xe = (x2.ceil() as usize).min(img.width);
    let ye = (y2.ceil() as usize).min(img.height);
    for y in ys..ye {
        for x in xs..xe {
            let dx = (x as f32 + 0.5 - bbox.cx) / rx;
            let dy = (y as f32 + 0.5 - bbox.cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                let old = img.get(x, y);
                img.set(x, y, shade(dx, dy, old));
            }
        }
    }
}

fn fill_rect(img: &mut GrayImage, bbox: &Bbox, mut shade: impl FnMut(usize, usize, u8) -> u8) {
    let (x1, y1, x2, y2) = bbox.corners();
    let xs = x1.floor().max(0.0) as usize;
    let ys = y1.floor().max(0.0) as usize;
    let xe = (x2.ceil() as usize).min(img.width);
    let ye = (y2.ceil() as usize).min(img.height);
    for y in ys..ye {
        for x in xs..xe {
            let old = img.get(x, y);
            img.set(x, y, shade(x, y, old));
        }
    }
}

/// Torsos are deliberately low-contrast: a faint striped lift over the
/// background. Pooled directly by the body RoI the structure is clean (and
/// per-pixel normalization rescales it), but as a far-field additive
/// component inside face-region features it barely clears the noise.
fn draw_body(img: &mut GrayImage, body: &Bbox, rng: &mut ChaCha8Rng) {
    let lift = rng.gen_range(10..18);
    let stripe = rng.gen_range(3..6usize);
    let phase = rng.gen_range(0..stripe);
    fill_ellipse(img, body, |_dx, dy, old| {
        let y_abs = (body.cy + dy * body.h / 2.0) as usize;
        let band = if (y_abs + phase) % stripe < stripe / 2 + 1 {
            lift
        } else {
            -lift
        };
        (old as i32 + lift + band).clamp(0, 255) as u8
    });
}

/// Clearance between the face box and the rendered torso: larger than the
/// worst-case RoI projection spill (one cell of the coarsest source map),
/// so the pooled face region reads the same pixels whether or not a body
/// exists below it.
pub const TORSO_GAP: f32 = 8.0;

/// Renders the torso strictly below the face (outside RoI spill range):
/// face appearance alone cannot reveal whether a body exists.
fn draw_torso_below(img: &mut GrayImage, face: &Bbox, body: &Bbox, rng: &mut ChaCha8Rng) {
    let (_, _, _, face_y2) = face.corners();
    let (bx1, _, bx2, by2) = body.corners();
    let top = face_y2 + TORSO_GAP;
    if by2 - top < 1.0 {
        return;
    }
    let torso = Bbox::from_corners(bx1, top, bx2, by2);
    draw_body(img, &torso, rng);
}

fn draw_face(img: &mut GrayImage, face: &Bbox, rng: &mut ChaCha8Rng) {
    let base = rng.gen_range(200..246) as i32;
    fill_ellipse(img, face, |dx, dy, _old| {
        let r2 = dx * dx + dy * dy;
        (base - (r2 * 30.0) as i32).clamp(0, 255) as u8
    });
    // Eye pair: the defining interior feature.
    let eye_gray = rng.gen_range(20..60) as i32;
    let eye_r = (face.w * 0.13).max(0.6);
    for side in [-1.0f32, 1.0] {
        let eye = Bbox::new(
            face.cx + side * 0.3 * face.w / 2.0 * 1.3,
            face.cy - 0.3 * face.h / 2.0,
            eye_r * 2.0,
            eye_r * 2.0,
        );
        fill_ellipse(img, &eye, |_dx, _dy, _old| eye_gray as u8);
    }
}

fn distractor_texture(rng: &mut ChaCha8Rng) -> impl FnMut(usize, usize, u8) -> u8 {
    let a = rng.gen_range(60..100) as u8;
    let b = rng.gen_range(140..180) as u8;
    let block = rng.gen_range(2..4usize);
    move |x, y, _old| {
        if (x / block + y / block) % 2 == 0 {
            a
        } else {
            b
        }
    }
}

fn occlude_face(img: &mut GrayImage, face: &Bbox, fraction: f32, rng: &mut ChaCha8Rng) {
    if fraction <= 0.0 {
        return;
    }
    let band_h = face.h * fraction.min(1.0);
    let (x1, y1, _x2, y2) = face.corners();
    let max_off = (face.h - band_h).max(0.0);
    let off = rng.gen_range(0.0..=1.0f32) * max_off;
    let band = Bbox::from_corners(x1, y1 + off, x1 + face.w, (y1 + off + band_h).min(y2));
    let mut tex = distractor_texture(rng);
    fill_rect(img, &band, &mut tex);
}

fn overlaps_any(candidate: &Bbox, others: &[Bbox], max_iou: f32) -> bool {
    others.iter().any(|b| candidate.iou(b) > max_iou)
}

/// Renders one scene: background, bodies below faces, occlusion bands, and
/// standalone distractors that carry one cue (face-like blob or body-like
/// stripes) but never both.
pub fn render_scene(cfg: &Config, rng: &mut ChaCha8Rng) -> SyntheticScene {
    let size = cfg.image_size;
    let img_w = size as f32;
    let mut img = GrayImage::new(size, size);

    // Background: base gray, gentle gradient, mild noise.
    let base = rng.gen_range(30..80) as i32;
    let slope_x = rng.gen_range(-20..=20) as f32 / size as f32;
    let slope_y = rng.gen_range(-20..=20) as f32 / size as f32;
    for y in 0..size {
        for x in 0..size {
            let noise = rng.gen_range(-8..=8);
            let v = base + (slope_x * x as f32 + slope_y * y as f32) as i32 + noise;
            img.set(x, y, v.clamp(0, 255) as u8);
        }
    }


    // Place faces so a slab of torso at least half a face tall stays
    // visible below the gap: the body cue is never clipped away.
    let n_faces = rng.gen_range(cfg.synth_faces_min..=cfg.synth_faces_max);
    let mut faces: Vec<Bbox> = Vec::new();
    for _ in 0..n_faces {
        for _attempt in 0..40 {
            let ln_lo = cfg.synth_face_min_size.ln();
            let ln_hi = cfg.synth_face_max_size.ln();
            let s = rng.gen_range(ln_lo..=ln_hi).exp();
            let h = s * rng.gen_range(1.0..1.25f32);
            let torso_min = (0.5 * h).max(4.0);
            let cy_max = img_w - (0.5 * h + TORSO_GAP + torso_min) - 1.0;
            if s + 2.0 >= img_w || h / 2.0 + 1.0 >= cy_max {
                continue;
            }
            let cx = rng.gen_range(s / 2.0 + 1.0..img_w - s / 2.0 - 1.0);
            let cy = rng.gen_range(h / 2.0 + 1.0..cy_max);
            let candidate = Bbox::new(cx, cy, s, h);
            if !overlaps_any(&candidate, &faces, 0.05) {
                faces.push(candidate);
                break;
            }
        }
    }

    let bodies: Vec<Bbox> = faces
        .iter()
        .map(|f| decode_deltas(f, cfg.spatial_relation.as_deltas()).clip(img_w, img_w, 1.0))
        .collect();

    for (face, body) in faces.iter().zip(&bodies) {
        draw_torso_below(&mut img, face, body, rng);
    }
    for face in &faces {
        draw_face(&mut img, face, rng);
    }
    let occlusion = vec![cfg.synth_occlusion; faces.len()];
    for (face, &frac) in faces.iter().zip(&occlusion) {
        occlude_face(&mut img, face, frac, rng);
    }

    // Distractors carry one cue but never both: a pixel-identical face
    // pattern without a body (only context can reject it), a bright blob,
    // or body-like stripes without a face. Fake faces draw their geometry
    // from exactly the same distribution and placement band as real ones,
    // so neither shape nor position can give them away.
    let n_distractors = rng.gen_range(0..=cfg.synth_distractors_max);
    for _ in 0..n_distractors {
        for _attempt in 0..40 {
            let s = rng
                .gen_range(cfg.synth_face_min_size.ln()..=cfg.synth_face_max_size.ln())
                .exp();
            let h = s * rng.gen_range(1.0..1.25f32);
            let torso_min = (0.5 * h).max(4.0);
            let cy_max = img_w - (0.5 * h + TORSO_GAP + torso_min) - 1.0;
            if s + 2.0 >= img_w || h / 2.0 + 1.0 >= cy_max {
                continue;
            }
            let cx = rng.gen_range(s / 2.0 + 1.0..img_w - s / 2.0 - 1.0);
            let cy = rng.gen_range(h / 2.0 + 1.0..cy_max);
            let candidate = Bbox::new(cx, cy, s, h);
            if overlaps_any(&candidate, &faces, 0.05) || overlaps_any(&candidate, &bodies, 0.25) {
                continue;
            }
            match rng.gen_range(0..8) {
                0..=5 => {
                    // Bodyless face, rendered through the same pipeline as a
                    // real one, occlusion band included: only the aligned
                    // body region can tell it apart.
                    draw_face(&mut img, &candidate, rng);
                    occlude_face(&mut img, &candidate, cfg.synth_occlusion, rng);
                }
                6 => {
                    let gray = rng.gen_range(190..240) as u8;
                    fill_ellipse(&mut img, &candidate, |_dx, _dy, _old| gray);
                }
                _ => {
                    draw_body(&mut img, &candidate, rng);
                }
            }
            break;
        }
    }

    SyntheticScene {
        image: img,
        faces,
        bodies,
        occlusion,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenSummary {
    pub train_images: usize,
    pub val_images: usize,
    pub train_faces: usize,
    pub val_faces: usize,
}

fn generate_split(cfg: &Config, split: &str, count: usize, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut face_lines: Vec<Annotation> = Vec::new();
    let mut body_lines: Vec<Annotation> = Vec::new();
    for i in 0..count {
        let mut rng = derive_rng(cfg.seed, split, i as u64);
        let scene = render_scene(cfg, &mut rng);
        let name = format!("img_{i:06}.pgm");
        write_pgm(&dir.join(&name), &scene.image)?;
        for (face, body) in scene.faces.iter().zip(&scene.bodies) {
            face_lines.push(Annotation {
                image: name.clone(),
                bbox: *face,
            });
            body_lines.push(Annotation {
                image: name.clone(),
                bbox: *body,
            });
        }
    }
    write_annotations(&dir.join("faces.txt"), &face_lines)?;
    write_annotations(&dir.join("bodies.txt"), &body_lines)?;
    Ok(face_lines.len())
}

/// Writes `out/train` and `out/val`, each with images plus `faces.txt` and
/// `bodies.txt`. Fully determined by (config, seed).
pub fn generate(cfg: &Config, out: &Path) -> Result<GenSummary> {
    let train_faces = generate_split(cfg, "train", cfg.synth_train_images, &out.join("train"))?;
    let val_faces = generate_split(cfg, "val", cfg.synth_val_images, &out.join("val"))?;
    Ok(GenSummary {
        train_images: cfg.synth_train_images,
        val_images: cfg.synth_val_images,
        train_faces,
        val_faces,
    })
}
