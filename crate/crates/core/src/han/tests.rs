use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::diffcore::gradcheck::{self, weighted_sum};
use crate::diffcore::{Bound, Graph, Tensor};
use crate::geometry::Pixel;
use crate::sim::{reset, Part, RegionKind, TaskId, TaskSpec, LABEL_TABLE};

fn scene(task: TaskId, seed: u64) -> Scene {
    reset(&TaskSpec::new(task), RegionKind::Interpolation, seed).unwrap()
}

/// Rendered observation with the RGB replaced by noise (no ties in max
/// pools) and a random gripper position.
fn noisy_obs(cfg: &PolicyConfig, seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = scene(TaskId::Lifting, seed);
    s.gripper.x_ee = Point3::robot(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(0.02..0.3),
    );
    let r = Renderer::new(CameraModel::front_view(cfg.image.0, cfg.image.1));
    let mut obs = Observation::capture(&s, &r);
    for p in &mut obs.rgb {
        *p = rng.random();
    }
    obs
}

fn rendered_obs(cfg: &PolicyConfig, task: TaskId, seed: u64) -> Observation {
    let r = Renderer::new(CameraModel::front_view(cfg.image.0, cfg.image.1));
    Observation::capture(&scene(task, seed), &r)
}

// ---------------------------------------------------------------- config

#[test]
fn config_validation() {
    let mut c = PolicyConfig::new(Variant::Han);
    c.validate().unwrap();
    PolicyConfig::paper_scale(Variant::Han).validate().unwrap();
    c.crop = (60, 20);
    assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
    let mut c = PolicyConfig::new(Variant::Han);
    c.n_regions = 0;
    assert!(c.validate().is_err());
    let mut c = PolicyConfig::new(Variant::Han);
    c.offset_bound = 0.0;
    assert!(c.validate().is_err());
    let err = "resnet".parse::<Variant>().unwrap_err().to_string();
    assert!(err.contains("bc_image"));
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}

// ---------------------------------------------------------------- regions

#[test]
fn near_full_crops_have_binary_origins() {
    let mut c = PolicyConfig::new(Variant::Han);
    c.crop = (59, 79);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..200 {
        for r in propose_regions(&mut rng, &c).unwrap() {
            assert!(r.origin.0 <= 1 && r.origin.1 <= 1);
            assert!(r.fits(60, 80));
            seen.insert(r.origin);
        }
    }
    assert_eq!(seen.len(), 4);
}

#[test]
fn oversized_crop_is_a_config_error() {
    let mut c = PolicyConfig::new(Variant::Han);
    c.crop = (61, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(propose_regions(&mut rng, &c), Err(crate::Error::Config(_))));
}

#[test]
fn proposals_are_deterministic_per_seed() {
    let c = PolicyConfig::new(Variant::Han);
    let a = propose_regions(&mut ChaCha8Rng::seed_from_u64(5), &c).unwrap();
    let b = propose_regions(&mut ChaCha8Rng::seed_from_u64(5), &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
}

#[test]
fn origins_are_uniform_chi_squared() {
    let c = PolicyConfig::new(Variant::Han);
    let (rows, cols) = (c.image.0 - c.crop.0 + 1, c.image.1 - c.crop.1 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut joint = vec![0f64; rows * cols];
    let mut counts_r = vec![0f64; rows];
    let mut counts_c = vec![0f64; cols];
    let mut n = 0;
    while n < 10_000 {
        for r in propose_regions(&mut rng, &c).unwrap() {
            counts_r[r.origin.0] += 1.0;
            counts_c[r.origin.1] += 1.0;
            joint[r.origin.0 * cols + r.origin.1] += 1.0;
            n += 1;
        }
    }
    for counts in [counts_r, counts_c, joint] {
        let e = n as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|o| (o - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }
}

#[test]
fn gripper_patch_is_centered_and_clamped() {
    let cam = CameraModel::front_view(60, 80);
    let x = [0.0, 0.05, 0.1];
    let px = cam.project(Point3::robot(x[0], x[1], x[2])).unwrap();
    let p = gripper_patch(&cam, x, (20, 26));
    assert!(p.fits(60, 80));
    assert!((p.origin.0 as f64 + 9.5 - px.u).abs() <= 0.5);
    assert!((p.origin.1 as f64 + 12.5 - px.v).abs() <= 0.5);
    let corner = gripper_patch(&cam, [0.34, 0.34, 0.0], (20, 26));
    assert!(corner.fits(60, 80));
}

#[test]
fn crop_is_planar_and_normalized() {
    let rgb: Vec<u8> = (0..4 * 5 * 3).map(|i| i as u8).collect();
    let region = RegionProposal {
        origin: (1, 2),
        size: (2, 3),
    };
    let mut out = vec![0.0f64; 3 * 6];
    write_crop(&rgb, 5, &region, &mut out);
    for ch in 0..3 {
        for i in 0..2 {
            for j in 0..3 {
                let want = rgb[((1 + i) * 5 + 2 + j) * 3 + ch] as f64 / 255.0 - 0.5;
                assert_eq!(out[ch * 6 + i * 3 + j], want);
            }
        }
    }
}

// ---------------------------------------------------------------- keypoints

fn crops_var(g: &mut Graph<f64>, data: Vec<f64>, m: usize, cfg: &PolicyConfig) -> crate::diffcore::Var {
    g.constant(Tensor::from_vec(&[m, 3, cfg.crop.0, cfg.crop.1], data).unwrap())
}

#[test]
fn identical_crops_give_identical_keypoints_and_features() {
    let cfg = PolicyConfig::new(Variant::Han);
    let p = Policy::<f32>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let len = 3 * cfg.crop.0 * cfg.crop.1;
    let crop: Vec<f32> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    let other: Vec<f32> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    let data = [crop.clone(), other, crop].concat();
    let mut g = Graph::inference();
    let b = p.store.bind(&mut g);
    let x = g.constant(Tensor::from_vec(&[3, 3, cfg.crop.0, cfg.crop.1], data).unwrap());
    let (kp, feats) = p.detect_keypoints(&mut g, &b, x).unwrap();
    let kp = g.value(kp).data();
    let f = g.value(feats).data();
    let d = f.len() / 3;
    assert_eq!(kp[0..2], kp[4..6]);
    assert_eq!(f[0..d], f[2 * d..3 * d]);
    assert_ne!(f[0..d], f[d..2 * d]);
}

#[test]
fn constant_crop_puts_the_keypoint_at_the_crop_center() {
    for seed in 0..5 {
        let mut cfg = PolicyConfig::new(Variant::Han);
        cfg.seed = seed;
        let p = Policy::<f64>::new(cfg.clone()).unwrap();
        let mut g = Graph::inference();
        let b = p.store.bind(&mut g);
        let x = crops_var(&mut g, vec![0.3 - 0.1 * seed as f64; 3 * 20 * 26], 1, &cfg);
        let (kp, _) = p.detect_keypoints(&mut g, &b, x).unwrap();
        let kp = g.value(kp).data().to_vec();
        let (mh, mw) = cfg.backbone.map_size(20, 26);
        assert!((kp[0] - (mh as f64 - 1.0) / 2.0).abs() < 1e-12);
        assert!((kp[1] - (mw as f64 - 1.0) / 2.0).abs() < 1e-12);
        // Mapped into the crop that is its center pixel.
        let u = (kp[0] + 0.5) * 20.0 / mh as f64 - 0.5;
        let v = (kp[1] + 0.5) * 26.0 / mw as f64 - 0.5;
        assert!((u - 9.5).abs() < 1e-9 && (v - 12.5).abs() < 1e-9);
    }
}

/// Scalar reference for replicate-padded 3x3 conv + relu (+ pool).
fn oracle_backbone(p: &Policy<f64>, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize, usize) {
    let mut cur = x.to_vec();
    let (mut c, mut h, mut w) = (3, h, w);
    for (i, &co) in p.config.backbone.channels.iter().enumerate() {
        let wt = p.store.params()[2 * i].tensor.data();
        let bs = p.store.params()[2 * i + 1].tensor.data();
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for r in 0..h {
                for s in 0..w {
                    let mut acc = bs[o];
                    for ci in 0..c {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let rr = (r as isize + ki as isize - 1).clamp(0, h as isize - 1) as usize;
                                let ss = (s as isize + kj as isize - 1).clamp(0, w as isize - 1) as usize;
                                acc += wt[((o * c + ci) * 3 + ki) * 3 + kj] * cur[(ci * h + rr) * w + ss];
                            }
                        }
                    }
                    out[(o * h + r) * w + s] = acc.max(0.0);
                }
            }
        }
        c = co;
        if p.config.backbone.pool_after[i] {
            let (ho, wo) = (h / 2, w / 2);
            let mut pooled = vec![0.0; c * ho * wo];
            for o in 0..c {
                for r in 0..ho {
                    for s in 0..wo {
                        let mut m = f64::NEG_INFINITY;
                        for (dr, ds) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            m = m.max(out[(o * h + 2 * r + dr) * w + 2 * s + ds]);
                        }
                        pooled[(o * ho + r) * wo + s] = m;
                    }
                }
            }
            out = pooled;
            h = ho;
            w = wo;
        }
        cur = out;
    }
    (cur, c, h, w)
}

#[test]
fn keypoint_detector_matches_step_by_step_oracle() {
    let cfg = PolicyConfig::new(Variant::Han);
    let p = Policy::<f64>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..3 * 20 * 26).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut g = Graph::inference();
    let b = p.store.bind(&mut g);
    let xv = crops_var(&mut g, x.clone(), 1, &cfg);
    let (kp, feats) = p.detect_keypoints(&mut g, &b, xv).unwrap();

    let (fmap, c, h, w) = oracle_backbone(&p, &x, 20, 26);
    let kw = p.store.get(p.store.id("han.keypoint.weight").unwrap()).tensor.data();
    let score: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| kw[ch] * fmap[ch * h * w + i]).sum())
        .collect();
    let m = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = score.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let eu: f64 = e.iter().enumerate().map(|(i, q)| q / z * (i / w) as f64).sum();
    let ev: f64 = e.iter().enumerate().map(|(i, q)| q / z * (i % w) as f64).sum();
    let kp = g.value(kp).data();
    assert!((kp[0] - eu).abs() < 1e-10 && (kp[1] - ev).abs() < 1e-10);
    let f = g.value(feats).data();
    for ch in 0..c {
        let plane = &fmap[ch * h * w..(ch + 1) * h * w];
        let mx = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let av = plane.iter().sum::<f64>() / (h * w) as f64;
        assert!((f[ch] - mx).abs() < 1e-10);
        assert!((f[c + ch] - av).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------- lifting

fn box_sdf(o: &crate::sim::Object, p: [f64; 3]) -> f64 {
    let l = o.pose.to_local(p);
    let Part::Box { center, half } = o.shape.parts()[0] else {
        panic!("cube is a box")
    };
    let q: Vec<f64> = (0..3).map(|k| (l[k] - center[k]).abs() - half[k]).collect();
    let out = q.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>().sqrt();
    out + q.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0)
}

#[test]
fn keypoints_on_the_cube_lift_onto_its_surface() {
    let cam = CameraModel::front_view(60, 80);
    let r = Renderer::new(cam);
    let mut checked = 0;
    for seed in 0..20 {
        let s = scene(TaskId::Lifting, seed);
        let out = r.render(&s);
        let depth = quantize_depth(&out.depth);
        let cube = s.object("cube").unwrap();
        for u in 0..60 {
            for v in 0..80 {
                if out.labels[u * 80 + v] != cube.id as i32 {
                    continue;
                }
                let (p, bg) = lift_to_3d(&[[u as f64, v as f64]], &depth, &cam)[0];
                assert!(!bg);
                let d = box_sdf(cube, p.to_array()).abs();
                assert!(d < 0.005, "pixel ({u},{v}) lifted {d} m off the cube");
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn principal_point_over_the_table_hits_the_analytic_plane_point() {
    let cam = CameraModel::front_view(61, 81);
    let mut s = scene(TaskId::Lifting, 0);
    s.objects.clear();
    s.gripper.x_ee = Point3::robot(-0.3, -0.3, 0.35);
    let out = Renderer::new(cam).render(&s);
    let depth = quantize_depth(&out.depth);
    let (u, v) = (cam.cy, cam.cx);
    assert_eq!(out.labels[30 * 81 + 40], LABEL_TABLE);
    let (p, _) = lift_to_3d(&[[u, v]], &depth, &cam)[0];
    // The optical axis meets the table at the table center.
    let c = cam.center();
    let (dir, _) = cam.ray(u, v);
    let t = -c[2] / dir[2];
    let want = [c[0] + t * dir[0], c[1] + t * dir[1], 0.0];
    assert!(geometry_dist(p.to_array(), want) < 1e-3, "{p:?} vs {want:?}");
    assert!(geometry_dist(want, [0.0; 3]) < 1e-9);
}

fn geometry_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    crate::geometry::dist(a, b)
}

#[test]
fn lifting_agrees_with_unproject_and_flags_background() {
    let cam = CameraModel::front_view(60, 80);
    let mut depth = vec![0.9f32; 60 * 80];
    depth[5 * 80 + 7] = BACKGROUND_DEPTH;
    let kps = [[10.2, 20.7], [10.2, 20.7], [5.1, 6.8]];
    let out = lift_to_3d(&kps, &depth, &cam);
    assert_eq!(out[0], out[1]);
    assert!(!out[0].1 && out[2].1);
    let want = cam
        .cam_to_robot(cam.unproject(Pixel::with_depth(10.2, 20.7, 0.9f32 as f64)).unwrap())
        .unwrap();
    assert!(out[0].0.distance(&want) < 1e-12);
}

// ---------------------------------------------------------------- switching

#[test]
fn singleton_softmax_selects_the_only_candidate() {
    let (c, kp) = switch_attention(&[-3.7], &[[0.1, 0.2, 0.3]]);
    assert_eq!(c, vec![1.0]);
    assert_eq!(kp, [0.1, 0.2, 0.3]);
}

#[test]
fn equal_scores_average_the_candidates() {
    let cands = [[0.0, 0.0, 0.0], [0.3, 0.0, 0.3], [0.0, 0.6, 0.0]];
    let (c, kp) = switch_attention(&[0.4, 0.4, 0.4], &cands);
    for ci in &c {
        assert!((ci - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(geometry_dist(kp, [0.1, 0.2, 0.1]) < 1e-15);
}

#[test]
fn hand_set_logits_give_the_hand_evaluated_mixture() {
    let cands = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let (c, kp) = switch_attention(&[2.0, 0.0, 0.0], &cands);
    let e2 = 2.0f64.exp();
    let z = e2 + 2.0;
    assert!((c[0] - e2 / z).abs() < 1e-15 && (c[1] - 1.0 / z).abs() < 1e-15);
    assert!(geometry_dist(kp, [e2 / z, 1.0 / z, 1.0 / z]) < 1e-15);
}

#[test]
fn graph_switch_with_identical_features_weights_uniformly() {
    let cfg = PolicyConfig::new(Variant::Han);
    let p = Policy::<f64>::new(cfg).unwrap();
    let mut g = Graph::inference();
    let b = p.store.bind(&mut g);
    let f: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).sin()).collect();
    let feats = g.constant(Tensor::from_vec(&[4, 64], f.repeat(4)).unwrap());
    let cands_data = vec![0.0, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.4];
    let cands = g.constant(Tensor::from_vec(&[4, 3], cands_data).unwrap());
    let (c, kp, roi) = p.switch_attention(&mut g, &b, feats, cands, 1).unwrap();
    assert!(g.value(c).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    let kp = g.value(kp).data();
    assert!(geometry_dist([kp[0], kp[1], kp[2]], [0.1, 0.1, 0.1]) < 1e-15);
    for (a, b) in g.value(roi).data().iter().zip(&f) {
        assert!((a - b).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- action

#[test]
fn squashing_at_zero_and_at_the_asymptote() {
    let (off, k, grip) = action_target([0.0; 5], 0.1, Variant::Han);
    assert_eq!(off, [0.0; 3]);
    assert_eq!(k, 0.5);
    assert_eq!(grip, 0.0);
    let (off, k, _) = action_target([1e3, -1e3, 50.0, 1e3, 2.0], 0.1, Variant::Han);
    assert_eq!(off, [0.1, -0.1, 0.1]);
    assert_eq!(k, 1.0);
    let (off, k, _) = action_target([1e3, -1e3, 50.0, 7.0, 2.0], 0.1, Variant::NoCon);
    assert_eq!((off, k), ([1e3, -1e3, 50.0], 7.0));
}

#[test]
fn compose_action_examples() {
    assert_eq!(
        compose_action([0.4, 0.1, 0.2], [0.0, 0.0, 0.05], 0.0, [0.3, 0.1, 0.1], 1.0)[..3],
        [0.0; 3]
    );
    let a = compose_action([0.1, 0.2, 0.3], [0.05, -0.05, 0.0], 0.73, [0.15, 0.15, 0.3], -2.0);
    assert!(a[..3].iter().all(|x| x.abs() < 1e-15));
    assert_eq!(a[3], -2.0);
    let a = compose_action([0.4, 0.1, 0.2], [0.0, 0.0, 0.05], 0.5, [0.3, 0.1, 0.1], 0.0);
    for (x, y) in a.iter().zip([0.05, 0.0, 0.075, 0.0]) {
        assert!((x - y).abs() < 1e-7);
    }
}

#[test]
fn action_head_matches_scalar_oracle() {
    let cfg = PolicyConfig::tiny(Variant::Han);
    let p = Policy::<f64>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fd = cfg.feature_dims();
    let kp = [0.05, -0.1, 0.03];
    let ee = [0.1, 0.12, 0.2];
    let patch: Vec<f64> = (0..fd).map(|_| rng.random_range(0.0..1.0)).collect();
    let roi: Vec<f64> = (0..fd).map(|_| rng.random_range(0.0..1.0)).collect();

    let mut g = Graph::inference();
    let b = p.store.bind(&mut g);
    let vk = g.constant(Tensor::from_vec(&[1, 3], kp.to_vec()).unwrap());
    let ve = g.constant(Tensor::from_vec(&[1, 3], ee.to_vec()).unwrap());
    let vp = g.constant(Tensor::from_vec(&[1, fd], patch.clone()).unwrap());
    let vr = g.constant(Tensor::from_vec(&[1, fd], roi.clone()).unwrap());
    let raw = p.action_head(&mut g, &b, vk, ve, vp, vr).unwrap();
    let (off, k, grip, action) = p.compose(&mut g, raw, vk, ve).unwrap();

    let mut input: Vec<f64> = kp.iter().chain(&ee).map(|x| 10.0 * x).collect();
    input.extend((0..3).map(|i| 10.0 * (kp[i] - ee[i])));
    input.extend(&patch);
    input.extend(&roi);
    let t = |n: &str| p.store.get(p.store.id(n).unwrap()).tensor.clone();
    let dense = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
        let (o, i) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = dense(&t("han.head.mlp.0.weight"), &t("han.head.mlp.0.bias"), &input)
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    let out = dense(&t("han.head.mlp.1.weight"), &t("han.head.mlp.1.bias"), &h);
    let (want_off, want_k, want_grip) = action_target([out[0], out[1], out[2], out[3], out[4]], 0.1, Variant::Han);
    let want_a = compose_action(kp, want_off, want_k, ee, want_grip);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(g.value(raw).data(), &out));
    assert!(close(g.value(off).data(), &want_off));
    assert!(close(g.value(k).data(), &[want_k]));
    assert!(close(g.value(grip).data(), &[want_grip]));
    assert!(close(g.value(action).data(), &want_a));
}

// ---------------------------------------------------------------- forward

fn check_invariants(out: &PolicyOutput, x_ee: [f64; 3]) {
    let sum: f64 = out.confidences.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(out
        .confidences
        .iter()
        .all(|&c| c > 0.0 && c < 1.0 || out.confidences.len() == 1));
    let off = out.x_offset.unwrap();
    assert!(off.iter().all(|x| x.abs() <= 0.1));
    let k = out.k.unwrap();
    assert!((0.0..=1.0).contains(&k));
    // x_kp is the confidence-weighted candidate mean.
    let cands: Vec<[f64; 3]> = out.candidate_kps.iter().map(|p| p.to_array()).collect();
    let (_, mean) = switch_attention(&out.confidences.iter().map(|c| c.ln()).collect::<Vec<_>>(), &cands);
    assert!(geometry_dist(mean, out.x_kp.unwrap().to_array()) < 1e-4);
    let t = out.x_target.unwrap();
    let norm_t = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_a = out.action[..3].iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm_a <= norm_t * (1.0 + 1e-6) + 1e-9);
    let target = target_vector(out.x_kp.unwrap().to_array(), off, x_ee);
    assert!(geometry_dist(target, t) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn han_outputs_satisfy_their_constraints(seed in 0u64..1_000_000, gain in 0.1f64..30.0) {
        let mut cfg = PolicyConfig::tiny(Variant::Han);
        cfg.seed = seed;
        let mut p = Policy::<f32>::new(cfg.clone()).unwrap();
        // Blow up the head so the squashing saturates on some draws.
        for prm in p.store.params().to_vec() {
            if prm.name.starts_with("han.head") {
                let id = p.store.id(&prm.name).unwrap();
                for x in p.store.get_mut(id).tensor.data_mut() {
                    *x *= gain as f32;
                }
            }
        }
        let obs = noisy_obs(&cfg, seed);
        let out = p.forward(&obs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.confidences.len(), 3);
        check_invariants(&out, obs.x_ee.to_array());
    }
}

#[test]
fn toy_scale_forward_satisfies_constraints_for_every_attention_variant() {
    for v in [Variant::Han, Variant::NoCon, Variant::NoRoi, Variant::MlpAtn] {
        let cfg = PolicyConfig::new(v);
        let p = Policy::<f32>::new(cfg.clone()).unwrap();
        let obs = rendered_obs(&cfg, TaskId::Stacking, 2);
        let out = p.forward(&obs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.candidate_kps.len(), p.regions_per_sample());
        assert!(out.action.iter().all(|x| x.is_finite()));
        assert!((out.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        if v == Variant::Han || v == Variant::NoRoi {
            check_invariants(&out, obs.x_ee.to_array());
        }
        if v == Variant::MlpAtn {
            assert!(out.x_offset.is_none() && out.k.is_none());
        }
        for (px, r) in out.candidate_pixels.iter().zip(&out.regions) {
            assert!(px[0] >= r.origin.0 as f64 - 0.5 && px[0] <= (r.origin.0 + r.size.0) as f64 - 0.5);
            assert!(px[1] >= r.origin.1 as f64 - 0.5 && px[1] <= (r.origin.1 + r.size.1) as f64 - 0.5);
        }
        serde_json::from_str::<PolicyOutput>(&out.to_json().unwrap()).unwrap();
    }
}

#[test]
fn baselines_run_and_bc_states_needs_poses() {
    for v in [Variant::BcImage, Variant::BcStates] {
        let mut cfg = PolicyConfig::new(v);
        cfg.bc_state_objects = 2;
        let p = Policy::<f32>::new(cfg.clone()).unwrap();
        let mut obs = rendered_obs(&cfg, TaskId::Stacking, 0);
        let out = p.forward(&obs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.action.iter().all(|x| x.is_finite()));
        assert!(out.x_kp.is_none() && out.confidences.is_empty());
        if v == Variant::BcStates {
            obs.object_positions = None;
            let err = p.forward(&obs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
            assert!(matches!(err, crate::Error::Usage(_)));
        }
    }
}

#[test]
fn wrong_resolution_is_rejected() {
    let p = Policy::<f32>::new(PolicyConfig::new(Variant::Han)).unwrap();
    let obs = rendered_obs(&PolicyConfig::paper_scale(Variant::Han), TaskId::Lifting, 0);
    assert!(p.forward(&obs, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn duplicated_regions_are_translation_equivariant() {
    let cfg = PolicyConfig::new(Variant::Han);
    let p = Policy::<f32>::new(cfg.clone()).unwrap();
    // Periodic image: crops whose origins differ by a period see the same
    // pixels.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tile: Vec<u8> = (0..7 * 9 * 3).map(|_| rng.random()).collect();
    let mut obs = rendered_obs(&cfg, TaskId::Lifting, 0);
    for r in 0..60 {
        for c in 0..80 {
            for k in 0..3 {
                obs.rgb[(r * 80 + c) * 3 + k] = tile[((r % 7) * 9 + c % 9) * 3 + k];
            }
        }
    }
    let mut sample = p.sample(&obs, &mut rng).unwrap();
    sample.regions[0].origin = (3, 5);
    sample.regions[1].origin = (3 + 14, 5 + 27);
    let mut g = Graph::inference();
    let b = p.store.bind(&mut g);
    let fwd = p.build(&mut g, &b, std::slice::from_ref(&sample)).unwrap();
    let d = [fwd.pixels[1][0] - fwd.pixels[0][0], fwd.pixels[1][1] - fwd.pixels[0][1]];
    assert!((d[0] - 14.0).abs() < 1e-9 && (d[1] - 27.0).abs() < 1e-9, "{d:?}");
}

#[test]
fn no_con_with_squashing_reapplied_reproduces_han() {
    let han = Policy::<f64>::new(PolicyConfig::new(Variant::Han)).unwrap();
    let mut cfg = PolicyConfig::new(Variant::NoCon);
    cfg.seed = 77;
    let no_con = Policy::<f64>::from_store(cfg.clone(), han.store.clone()).unwrap();
    for seed in 0..4 {
        let obs = rendered_obs(&cfg, TaskId::Lifting, seed);
        let a = han.forward(&obs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = no_con.forward(&obs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(a.regions, b.regions);
        assert_eq!(a.confidences, b.confidences);
        let raw = b.x_offset.unwrap();
        let (off, k, grip) = action_target([raw[0], raw[1], raw[2], b.k.unwrap(), b.grip_logit], 0.1, Variant::Han);
        let want = compose_action(b.x_kp.unwrap().to_array(), off, k, obs.x_ee.to_array(), grip);
        for (x, y) in a.action.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic_and_batching_does_not_change_results() {
    let cfg = PolicyConfig::new(Variant::Han);
    let p = Policy::<f32>::new(cfg.clone()).unwrap();
    let obs: Vec<Observation> = (0..3).map(|s| rendered_obs(&cfg, TaskId::Lifting, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<Sample> = obs.iter().map(|o| p.sample(o, &mut rng).unwrap()).collect();
    let mut g = Graph::inference();
    let b = p.store.bind(&mut g);
    let fwd = p.build(&mut g, &b, &samples).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let batched = p.output(&g, &fwd, &samples, i);
        let single = p.forward_sample(s).unwrap();
        assert_eq!(batched, single);
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    let p = Policy::<f32>::new(PolicyConfig::new(Variant::NoRoi)).unwrap();
    p.save(&path).unwrap();
    let q = Policy::<f32>::load(&path).unwrap();
    assert_eq!(q.config, p.config);
    let obs = rendered_obs(&p.config, TaskId::Lifting, 3);
    let a = p.forward(&obs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = q.forward(&obs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(a, b);
    let other = PolicyConfig::new(Variant::BcImage);
    assert!(Policy::from_store(other, q.store.clone()).is_err());
}

// ---------------------------------------------------------------- gradients

fn grad_samples(cfg: &PolicyConfig, n: usize) -> Vec<Observation> {
    (0..n as u64).map(|s| noisy_obs(cfg, 100 + s)).collect()
}

#[test]
fn every_parameter_of_every_variant_receives_gradient() {
    for v in Variant::ALL {
        let mut cfg = PolicyConfig::tiny(v);
        cfg.bc_state_objects = 1;
        let mut p = Policy::<f64>::new(cfg.clone()).unwrap();
        // Zero-initialized biases are a special point: every switch unit is
        // then gated identically across regions, and softmax cancels its
        // bias gradient. Move to a generic point first.
        let mut brng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..p.store.len() {
            let id = crate::diffcore::ParamId(i);
            if p.store.get(id).name.ends_with("bias") {
                for x in p.store.get_mut(id).tensor.data_mut() {
                    *x = brng.random_range(-0.3..0.3);
                }
            }
        }
        let obs: Vec<Observation> = (0..6).map(|s| rendered_obs(&cfg, TaskId::Lifting, s)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Sample> = obs.iter().map(|o| p.sample(o, &mut rng).unwrap()).collect();
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let fwd = p.build(&mut g, &b, &samples).unwrap();
        let loss = weighted_sum(&mut g, fwd.action, 1).unwrap();
        g.backward(loss).unwrap();
        let mut store = p.store.clone();
        store.accumulate_grads(&g, &b);
        for (i, prm) in p.store.params().iter().enumerate() {
            let gr = store.grad(crate::diffcore::ParamId(i)).unwrap_or(&[]);
            assert!(
                gr.iter().any(|x| x.abs() > 1e-12),
                "{v}: parameter {} has zero gradient",
                prm.name
            );
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for v in Variant::ALL {
        let cfg = PolicyConfig::tiny(v);
        let p = Policy::<f64>::new(cfg.clone()).unwrap();
        let obs = grad_samples(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<Sample> = obs.iter().map(|o| p.sample(o, &mut rng).unwrap()).collect();
        let inputs: Vec<Tensor<f64>> = p.store.params().iter().map(|x| x.tensor.clone()).collect();
        let report = gradcheck::check(v.name(), &inputs, |g, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let fwd = p.build(g, &bound, &samples)?;
            weighted_sum(g, fwd.action, 3)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
