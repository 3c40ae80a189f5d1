//! Procedural toy bins: layered rectangles and ellipses with amodal masks,
//! occlusion fractions computed from the layering, and templated
//! instructions. Used for the bundled sample data and for randomized tests.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{save_scene, DatasetError, InstructionRow};
use crate::geometry::Intrinsics;
use crate::mask::Mask;
use crate::scene::{ImageRef, ObjectId, ObjectInstance, OcclusionEdge, Point, Scene, SceneParts};
use crate::seed;

pub const CLASSES: &[&str] = &[
    "rubiks_cube",
    "juice_box",
    "toy_car",
    "screwdriver",
    "tennis_ball",
    "spray_can",
    "stapler",
    "banana",
    "mug",
    "screw_box",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of class labels drawn from [`CLASSES`]; fewer labels means more ambiguity.
    pub class_pool: usize,
    /// Smallest visible area an object may keep after layering.
    pub min_visible_px: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { scenes: 40, width: 160, height: 120, min_objects: 5, max_objects: 9, class_pool: 8, min_visible_px: 30 }
    }
}

struct Shape {
    mask: Mask,
}

fn random_shape(rng: &mut ChaCha8Rng, cfg: &SynthConfig, anchor: (f64, f64)) -> Shape {
    let (w, h) = (cfg.width, cfg.height);
    let sw = rng.random_range(14..=44) as f64;
    let sh = rng.random_range(10..=32) as f64;
    let cx = (anchor.0 + rng.random_range(-30.0..30.0)).clamp(sw / 2.0, w as f64 - sw / 2.0);
    let cy = (anchor.1 + rng.random_range(-22.0..22.0)).clamp(sh / 2.0, h as f64 - sh / 2.0);
    let mask = if rng.random_bool(0.5) {
        Mask::from_fn(h, w, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            (px - cx).abs() <= sw / 2.0 && (py - cy).abs() <= sh / 2.0
        })
    } else {
        Mask::from_fn(h, w, |x, y| {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / (sw / 2.0), (y as f64 + 0.5 - cy) / (sh / 2.0));
            dx * dx + dy * dy <= 1.0
        })
    };
    Shape { mask }
}

/// Keeps the centroid grasp on the object itself.
fn centroid_inside(mask: &Mask) -> bool {
    let n = mask.area() as f64;
    let (mut su, mut sv) = (0.0, 0.0);
    for (x, y) in mask.pixels() {
        su += x as f64 + 0.5;
        sv += y as f64 + 0.5;
    }
    mask.contains_point(su / n, sv / n)
}

/// Set pixel whose center is nearest the mask centroid.
fn interior_center(mask: &Mask) -> Point {
    let n = mask.area() as f64;
    let (mut su, mut sv) = (0.0, 0.0);
    for (x, y) in mask.pixels() {
        su += x as f64 + 0.5;
        sv += y as f64 + 0.5;
    }
    let (mu, mv) = (su / n, sv / n);
    let (x, y) = mask
        .pixels()
        .min_by(|a, b| {
            let da = (a.0 as f64 + 0.5 - mu).powi(2) + (a.1 as f64 + 0.5 - mv).powi(2);
            let db = (b.0 as f64 + 0.5 - mu).powi(2) + (b.1 as f64 + 0.5 - mv).powi(2);
            da.total_cmp(&db)
        })
        .expect("non-empty mask");
    Point::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Generates one scene; objects later in the stacking order lie on top.
pub fn generate_scene(cfg: &SynthConfig, scene_id: &str, rng: &mut ChaCha8Rng) -> Scene {
    loop {
        if let Some(scene) = try_generate(cfg, scene_id, rng) {
            return scene;
        }
    }
}

fn try_generate(cfg: &SynthConfig, scene_id: &str, rng: &mut ChaCha8Rng) -> Option<Scene> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let anchor = (rng.random_range(0.3..0.7) * cfg.width as f64, rng.random_range(0.3..0.7) * cfg.height as f64);
    // bottom to top
    let shapes: Vec<Shape> = (0..n).map(|_| random_shape(rng, cfg, anchor)).collect();
    let mut modal = Vec::with_capacity(n);
    for (j, s) in shapes.iter().enumerate() {
        let above = shapes[j + 1..].iter().fold(Mask::empty(cfg.height, cfg.width), |acc, a| acc.union(&a.mask));
        let visible = Mask::from_fn(cfg.height, cfg.width, |x, y| s.mask.get(x, y) && !above.get(x, y));
        if visible.area() < cfg.min_visible_px || !centroid_inside(&visible) {
            return None;
        }
        modal.push(visible);
    }
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(rng);
    let pool = cfg.class_pool.clamp(1, CLASSES.len());
    let objects: Vec<ObjectInstance> = (0..n)
        .map(|i| ObjectInstance {
            id: ObjectId(ids[i]),
            class_name: CLASSES[rng.random_range(0..pool)].to_string(),
            center: interior_center(&modal[i]),
            modal_mask: modal[i].clone(),
            amodal_mask: Some(shapes[i].mask.clone()),
        })
        .collect();
    let mut edges = Vec::new();
    for j in 0..n {
        let area = shapes[j].mask.area() as f64;
        for i in j + 1..n {
            let overlap = shapes[i].mask.intersection_area(&shapes[j].mask);
            if overlap > 0 {
                edges.push(OcclusionEdge {
                    occluder: ObjectId(ids[i]),
                    occluded: ObjectId(ids[j]),
                    fraction: overlap as f64 / area,
                });
            }
        }
    }
    let scene = Scene::new(SceneParts {
        scene_id: scene_id.to_string(),
        image: ImageRef { path: format!("{scene_id}.png"), width: cfg.width as u32, height: cfg.height as u32 },
        depth: None,
        intrinsics: Some(Intrinsics { fx: 200.0, fy: 200.0, cx: cfg.width as f64 / 2.0, cy: cfg.height as f64 / 2.0 }),
        objects,
        edges,
    })
    .expect("layered scenes are acyclic");
    Some(scene)
}

pub fn generate_scenes(cfg: &SynthConfig, seed: u64) -> Vec<Scene> {
    let mut rng = seed::rng(seed);
    (0..cfg.scenes).map(|i| generate_scene(cfg, &format!("toy_{i:03}"), &mut rng)).collect()
}

fn class_color(class: &str) -> Rgb<u8> {
    let h = seed::derive(0, class);
    Rgb([60 + (h & 0x9f) as u8, 60 + ((h >> 8) & 0x9f) as u8, 60 + ((h >> 16) & 0x9f) as u8])
}

/// Floor color of the rendered bin.
pub const BIN_COLOR: Rgb<u8> = Rgb([150, 40, 40]);

/// Flat-shaded picture of the visible objects over a bin-colored background.
pub fn render_scene_image(scene: &Scene) -> RgbImage {
    let mut img = RgbImage::from_pixel(scene.width(), scene.height(), BIN_COLOR);
    for o in scene.objects() {
        let color = class_color(&o.class_name);
        let edge = Rgb([color[0] / 2, color[1] / 2, color[2] / 2]);
        for (x, y) in o.modal_mask.pixels() {
            let border = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx < 0 || ny < 0 || !o.modal_mask.get(nx as usize, ny as usize)
            });
            img.put_pixel(x as u32, y as u32, if border { edge } else { color });
        }
    }
    img
}

fn region_name(scene: &Scene, p: Point) -> &'static str {
    let col = (3.0 * p.u / scene.width() as f64).floor().clamp(0.0, 2.0) as usize;
    let row = (3.0 * p.v / scene.height() as f64).floor().clamp(0.0, 2.0) as usize;
    [["top left", "top", "top right"], ["left side", "middle", "right side"], ["bottom left", "bottom", "bottom right"]]
        [row][col]
}

fn spoken(class: &str) -> String {
    class.replace('_', " ")
}

/// Three templated descriptions of `target` in varying structure.
pub fn templated_instructions(scene: &Scene, target: ObjectId) -> Vec<String> {
    let obj = scene.object(target).expect("target exists");
    let name = spoken(&obj.class_name);
    let region = region_name(scene, obj.center);
    let neighbour = scene
        .objects()
        .iter()
        .filter(|o| o.id != target)
        .min_by(|a, b| a.center.distance(&obj.center).total_cmp(&b.center.distance(&obj.center)));
    let third = match neighbour {
        Some(n) => format!("grab the {name} closest to the {}", spoken(&n.class_name)),
        None => format!("I need the {name}"),
    };
    vec![format!("the {name}"), format!("pick up the {name} in the {region} of the bin"), third]
}

/// Writes scenes, their images and a full instruction file under `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<Vec<Scene>, DatasetError> {
    let io = |path: &Path, e: std::io::Error| DatasetError::Io { path: path.to_owned(), source: e };
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| io(&scene_dir, e))?;
    let scenes = generate_scenes(cfg, seed);
    let mut rows = String::new();
    for scene in &scenes {
        save_scene(scene, &scene_dir.join(format!("{}.json", scene.scene_id())))?;
        let png = scene_dir.join(&scene.image().path);
        render_scene_image(scene).save(&png).map_err(|e| io(&png, std::io::Error::other(e.to_string())))?;
        for o in scene.objects() {
            let row = InstructionRow {
                scene_id: scene.scene_id().to_owned(),
                target_id: o.id.0,
                instructions: templated_instructions(scene, o.id),
            };
            rows.push_str(&serde_json::to_string(&row).expect("row serializes"));
            rows.push('\n');
        }
    }
    let instr = dir.join("instructions.jsonl");
    fs::write(&instr, rows).map_err(|e| io(&instr, e))?;
    Ok(scenes)
}
