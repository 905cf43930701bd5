mod common;

use geode_core::config::SceneConfig;
use geode_core::dataset::{read_records, task_counts, Manifest, Split};
use geode_core::pipeline::Lab;
use geode_core::render::{render_frames, sample_pointcloud};
use geode_core::scene::{generate_scene, Object, Scene, MAX_OVERLAP};
use geode_core::vocab::Vocab;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inside(o: &Object, p: [f64; 3]) -> bool {
    let l = o.to_local(p);
    (0..3).all(|a| l[a].abs() <= o.size[a] / 2.0)
}

/// Largest |local coordinate| / half extent; 1 on the surface.
fn surface_ratio(o: &Object, p: [f64; 3]) -> f64 {
    let l = o.to_local(p);
    (0..3).map(|a| l[a].abs() / (o.size[a] / 2.0)).fold(0.0, f64::max)
}

/// Overlap of two footprints as a fraction of the smaller, by uniform sampling
/// over the first footprint's bounding box.
fn mc_overlap_fraction(a: &Object, b: &Object, rng: &mut ChaCha8Rng) -> f64 {
    let r = a.size[0].hypot(a.size[1]) / 2.0;
    let n = 20_000;
    let mut both = 0;
    for _ in 0..n {
        let p = [
            a.center[0] + rng.gen_range(-r..r),
            a.center[1] + rng.gen_range(-r..r),
            0.0,
        ];
        let in_a = a.to_local(p).iter().zip(a.size).take(2).all(|(l, s)| l.abs() <= s / 2.0);
        let in_b = b.to_local(p).iter().zip(b.size).take(2).all(|(l, s)| l.abs() <= s / 2.0);
        if in_a && in_b {
            both += 1;
        }
    }
    let area = both as f64 / n as f64 * (2.0 * r) * (2.0 * r);
    area / a.footprint_area().min(b.footprint_area())
}

fn scene_for(seed: u64) -> Option<Scene> {
    generate_scene(seed, &SceneConfig::default()).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objects_rest_inside_the_room_without_heavy_overlap(seed in 0u64..100_000) {
        let Some(scene) = scene_for(seed) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, o) in scene.objects.iter().enumerate() {
            prop_assert!((o.center[2] - o.size[2] / 2.0).abs() < 1e-12);
            prop_assert!(o.size[2] <= scene.room.height);
            for [x, y] in o.footprint() {
                prop_assert!(x >= -1e-9 && x <= scene.room.width + 1e-9);
                prop_assert!(y >= -1e-9 && y <= scene.room.depth + 1e-9);
            }
            for b in &scene.objects[i + 1..] {
                // sampling error at 20k draws is well under 0.03
                prop_assert!(mc_overlap_fraction(o, b, &mut rng) <= MAX_OVERLAP + 0.03);
            }
        }
    }

    #[test]
    fn depth_is_the_first_surface_along_the_center_ray(seed in 0u64..10_000) {
        let Some(scene) = scene_for(seed) else { return Ok(()) };
        let frames = render_frames(&scene, seed, 2, 8).unwrap();
        for f in &frames {
            for r in 0..f.grid {
                for c in 0..f.grid {
                    let dir = f.pose.ray(f.grid, r, c, 0.5, 0.5);
                    let at = |t: f64| [0, 1, 2].map(|a| f.pose.position[a] + t * dir[a]);
                    let id = f.id_at(r, c);
                    let depth = f.depth_at(r, c);
                    // march up to the reported depth (or far away for misses)
                    let end = if id >= 0 { depth } else { 40.0 };
                    let steps = 400;
                    for k in 1..steps {
                        let p = at(end * k as f64 / steps as f64);
                        for o in &scene.objects {
                            prop_assert!(!inside(o, p) || surface_ratio(o, p) > 0.98,
                                "cell ({r},{c}) passes through object {} before depth {depth}", o.id);
                        }
                    }
                    if id >= 0 {
                        let o = scene.object(id as usize).unwrap();
                        prop_assert!((surface_ratio(o, at(depth)) - 1.0).abs() < 1e-6);
                    } else {
                        prop_assert_eq!(depth, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn cloud_points_lie_on_their_objects(seed in 0u64..10_000) {
        let Some(scene) = scene_for(seed) else { return Ok(()) };
        let frames = render_frames(&scene, seed, 4, 8).unwrap();
        let Ok(cloud) = sample_pointcloud(&scene, &frames, 256, seed) else { return Ok(()) };
        for (p, &id) in cloud.points.iter().zip(&cloud.ids) {
            let o = scene.object(id).unwrap();
            prop_assert!((surface_ratio(o, *p) - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn generated_dataset_matches_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config();
    cfg.data.train_scenes = 40;
    cfg.data.eval_scenes = 20;
    let lab = Lab::new(cfg.clone(), tmp.path()).unwrap();
    lab.gen_data().unwrap();
    for split in ["train", "eval"] {
        let s = common::oracle_check(&lab.data_dir(), split, &cfg.scene);
        assert!(s.numeric_checked > 0 && s.choices_checked > 0 && s.rationales_checked > 0);
        assert!(s.mismatches.is_empty(), "{split}: {:?}", &s.mismatches[..s.mismatches.len().min(5)]);
    }
}

#[test]
fn manifest_agrees_with_emitted_records() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    let lab = Lab::new(cfg.clone(), tmp.path()).unwrap();
    let (train, heldout) = lab.gen_data().unwrap();
    for (split, m) in [("train", train), ("eval", heldout)] {
        let loaded = Manifest::load(&lab.data_dir(), split).unwrap();
        assert_eq!(loaded, m);
        let records = read_records(&lab.data_dir(), split).unwrap();
        assert_eq!(records.len(), m.samples);
        assert_eq!(task_counts(records.iter().map(|r| &r.sample)), m.counts);
        assert_eq!((m.frames, m.grid), (cfg.data.frames, cfg.data.grid));
        let data = Split::load(&lab.data_dir(), split).unwrap();
        assert_eq!(data.scenes.len(), m.scenes);
        for r in &records {
            let sd = data.scene(r.sample.scene_id);
            assert_eq!(sd.frames.len(), cfg.data.frames);
            assert!(!sd.cloud.is_empty());
        }
    }
}

#[test]
fn regenerating_data_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    for dir in [a.path(), b.path()] {
        Lab::new(cfg.clone(), dir).unwrap().gen_data().unwrap();
    }
    let rel = Lab::new(cfg, a.path()).unwrap().data_dir().strip_prefix(a.path()).unwrap().to_path_buf();
    let mut files: Vec<_> = walk(&a.path().join(&rel));
    files.sort();
    assert!(!files.is_empty());
    for f in files {
        if f.ends_with("timings.jsonl") {
            continue;
        }
        let other = b.path().join(f.strip_prefix(a.path()).unwrap());
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(&other).unwrap(), "{}", f.display());
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn rationales_round_trip_through_the_tokenizer() {
    let cfg = common::tiny_config();
    let vocab = Vocab::base();
    let mut n = 0;
    let mut seed = 0;
    while n < 1000 {
        if let Ok((_, _, samples)) = geode_core::dataset::build_scene(seed, &cfg.scene, &cfg.data, seed as usize) {
            for s in samples {
                for text in [&s.rationale, &s.question, &s.answer_text] {
                    let ids = vocab.tokenize(text).unwrap();
                    assert_eq!(vocab.tokenize(&vocab.detokenize(&ids)).unwrap(), ids, "{text}");
                }
                n += 1;
            }
        }
        seed += 1;
    }
}
