#![allow(dead_code)]

use std::sync::Arc;

use graspbench_core::dataset::Scenario;
use graspbench_core::geometry::Intrinsics;
use graspbench_core::scene::{ImageRef, ObjectInstance, OcclusionEdge, SceneParts, SceneState};
use graspbench_core::{Mask, ObjectId, Point, Scene};

/// Objects side by side on a 4-pixel pitch, 12 pixels each.
pub fn strip(classes: &[&str], edges: &[(u32, u32, f64)]) -> Scene {
    try_strip(classes, edges).expect("valid strip scene")
}

pub fn try_strip(classes: &[&str], edges: &[(u32, u32, f64)]) -> Result<Scene, graspbench_core::scene::SceneError> {
    let n = classes.len().max(1);
    let (w, h) = (4 * n, 5);
    Scene::new(SceneParts {
        scene_id: "strip".into(),
        image: ImageRef { path: "strip.png".into(), width: w as u32, height: h as u32 },
        depth: None,
        intrinsics: None,
        objects: classes
            .iter()
            .enumerate()
            .map(|(i, c)| ObjectInstance {
                id: ObjectId(i as u32),
                class_name: c.to_string(),
                center: Point::new(4.0 * i as f64 + 1.5, 1.5),
                modal_mask: Mask::rect(h, w, 4 * i, 0, 4 * i + 3, 4),
                amodal_mask: None,
            })
            .collect(),
        edges: edges
            .iter()
            .map(|&(a, b, f)| OcclusionEdge { occluder: ObjectId(a), occluded: ObjectId(b), fraction: f })
            .collect(),
    })
}

/// A free target square inside the hole of a ring-shaped distractor. The
/// ring's mask misses the target entirely, yet its centroid lies on it.
pub fn ring_scene() -> Scene {
    let (w, h) = (40usize, 40usize);
    let ring = Mask::from_fn(h, w, |x, y| {
        let d = (x as f64 + 0.5 - 20.0).hypot(y as f64 + 0.5 - 20.0);
        (8.0..=14.0).contains(&d)
    });
    let cube = Mask::rect(h, w, 16, 16, 24, 24);
    let side = Mask::rect(h, w, 0, 0, 6, 6);
    Scene::new(SceneParts {
        scene_id: "ring".into(),
        image: ImageRef { path: "ring.png".into(), width: w as u32, height: h as u32 },
        depth: None,
        intrinsics: Some(Intrinsics { fx: 100.0, fy: 100.0, cx: 20.0, cy: 20.0 }),
        objects: vec![
            ObjectInstance {
                id: ObjectId(0),
                class_name: "tape".into(),
                center: Point::new(31.5, 20.5),
                modal_mask: ring,
                amodal_mask: None,
            },
            ObjectInstance {
                id: ObjectId(1),
                class_name: "cube".into(),
                center: Point::new(20.5, 20.5),
                modal_mask: cube,
                amodal_mask: None,
            },
            ObjectInstance {
                id: ObjectId(2),
                class_name: "sponge".into(),
                center: Point::new(3.5, 3.5),
                modal_mask: side,
                amodal_mask: None,
            },
        ],
        edges: vec![],
    })
    .expect("valid ring scene")
}

pub fn scenario(scene: &Arc<Scene>, target: u32, instructions: &[&str]) -> Scenario {
    let target = ObjectId(target);
    Scenario {
        scenario_id: Scenario::id_for(scene.scene_id(), target),
        scene_id: scene.scene_id().to_string(),
        target_id: target,
        difficulty: SceneState::new(scene.clone()).difficulty(target).expect("target exists"),
        instructions: instructions.iter().map(|s| s.to_string()).collect(),
    }
}
