use super::sh::SH_C0;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn front_camera(size: u32) -> Camera {
    Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], size, size, 40.0).unwrap()
}

/// `k⁰` that shades to `c` under the 3DGS offset.
fn dc_for(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| (v - 0.5) / SH_C0)
}

fn iso(position: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Splat {
    Splat {
        position,
        opacity,
        scale: [scale; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh: vec![dc_for(color)],
    }
}

#[test]
fn look_at_geometry() {
    let cam = front_camera(32);
    let c = cam.center();
    assert!((c[2] + 4.0).abs() < 1e-12 && c[0].abs() < 1e-12);
    let t = cam.world_to_camera([0.0; 3]);
    assert!((t[2] - 4.0).abs() < 1e-12);
    assert!(Camera::look_at([0.0; 3], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 40.0).is_err());
    let mut bad = cam;
    bad.fx = 0.0;
    assert!(bad.validate().is_err());
}

#[test]
fn empty_scene_renders_background() {
    let img = render(&SplatScene::default(), &front_camera(8), [0.1, 0.2, 0.3]).unwrap();
    assert_eq!(img, Image::filled(8, 8, [0.1, 0.2, 0.3]));
}

#[test]
fn single_gaussian_on_a_pixel() {
    let cam = front_camera(33);
    let s = iso([0.0; 3], 0.05, 0.8, [0.9, 0.4, 0.1]);
    let bg = [0.0, 0.0, 1.0];
    let (img, _) = render_splats(&[s], &cam, bg, false).unwrap();
    // The centre of a 33-pixel image sits on pixel (16.5, 16.5); shift the
    // principal point so the splat lands exactly on pixel 16.
    let mut cam2 = cam;
    cam2.cx = 16.0;
    cam2.cy = 16.0;
    let (img2, _) = render_splats(&[iso([0.0; 3], 0.05, 0.8, [0.9, 0.4, 0.1])], &cam2, bg, false).unwrap();
    let px = img2.pixel(16, 16);
    let want = [0.8 * 0.9, 0.8 * 0.4, 0.8 * 0.1 + 0.2 * 1.0];
    for c in 0..3 {
        assert!((px[c] - want[c]).abs() < 1e-12);
    }
    assert_eq!(img.pixel(0, 0), bg);
}

#[test]
fn two_overlapping_gaussians_match_hand_compositing() {
    let mut cam = front_camera(16);
    cam.cx = 8.0;
    cam.cy = 8.0;
    let near = iso([0.0, 0.0, -1.0], 0.1, 0.6, [1.0, 0.0, 0.0]);
    let far = iso([0.0, 0.0, 1.0], 0.2, 0.7, [0.0, 1.0, 0.0]);
    let bg = [0.0, 0.0, 0.5];
    let (img, _) = render_splats(&[far.clone(), near.clone()], &cam, bg, false).unwrap();
    let f = cam.fx;
    // On the optical axis the projected covariance is (f·s/z)² I + 0.3 I.
    let var = |s: &Splat| (f * s.scale[0] / (s.position[2] + 4.0)).powi(2) + COV2D_BLUR;
    for (x, y) in [(8u32, 8u32), (10, 7), (5, 11)] {
        let d2 = (x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2);
        let a1 = near.opacity * (-0.5 * d2 / var(&near)).exp();
        let a2 = far.opacity * (-0.5 * d2 / var(&far)).exp();
        let a1 = if a1 >= MIN_ALPHA { a1 } else { 0.0 };
        let a2 = if a2 >= MIN_ALPHA { a2 } else { 0.0 };
        let want = [a1, (1.0 - a1) * a2, (1.0 - a1) * (1.0 - a2) * 0.5];
        let got = img.pixel(x, y);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-12, "pixel ({x},{y}) channel {c}: {} vs {}", got[c], want[c]);
        }
    }
}

fn random_splats(n: usize, rng: &mut ChaCha8Rng) -> Vec<Splat> {
    (0..n)
        .map(|_| {
            let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            q[0] += 2.0;
            Splat {
                position: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                opacity: rng.random_range(0.2..0.95),
                scale: std::array::from_fn(|_| rng.random_range(0.05..0.3)),
                rotation: q,
                sh: (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect(),
            }
        })
        .collect()
}

#[test]
fn transmittance_is_conserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut splats = random_splats(40, &mut rng);
    let cam = front_camera(24);
    for s in &mut splats {
        s.sh = vec![dc_for([1.0; 3])];
    }
    let (weights, _) = render_splats(&splats, &cam, [0.0; 3], false).unwrap();
    for s in &mut splats {
        s.sh = vec![dc_for([0.0; 3])];
    }
    let (rest, _) = render_splats(&splats, &cam, [1.0; 3], false).unwrap();
    for (a, b) in weights.data.iter().zip(&rest.data) {
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn input_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let splats = random_splats(60, &mut rng);
    let cam = front_camera(20);
    let (a, _) = render_splats(&splats, &cam, [0.2; 3], false).unwrap();
    let mut rev = splats.clone();
    rev.reverse();
    let (b, _) = render_splats(&rev, &cam, [0.2; 3], false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_opacity_splats_are_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let splats = random_splats(30, &mut rng);
    let cam = front_camera(20);
    let mut masked = splats.clone();
    let mut kept = Vec::new();
    for (i, s) in masked.iter_mut().enumerate() {
        if i % 3 == 0 {
            s.opacity = 0.0;
            s.scale = [0.0; 3];
        } else {
            kept.push(splats[i].clone());
        }
    }
    let (a, _) = render_splats(&masked, &cam, [0.0; 3], false).unwrap();
    let (b, _) = render_splats(&kept, &cam, [0.0; 3], false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gaussian_alpha_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in random_splats(20, &mut rng) {
        assert!((gaussian_alpha(&s, s.position) - s.opacity).abs() < 1e-15);
        let cov = splat_covariance(&s);
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let d = vec3(sub3(x, s.position));
        let sol = cov.lu().solve(&d).unwrap();
        let want = s.opacity * (-0.5 * d.dot(&sol)).exp();
        assert!((gaussian_alpha(&s, x) - want).abs() < 1e-12);
    }
    let s = iso([1.0, 2.0, 3.0], 0.5, 0.7, [0.0; 3]);
    let a = gaussian_alpha(&s, [1.5, 2.0, 3.0]);
    assert!((a - 0.7 * (-0.5f64).exp()).abs() < 1e-15);
}

fn weighted(img: &Image, w: &Image) -> f64 {
    img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cam = Camera::look_at([0.3, -0.2, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 8, 8, 50.0).unwrap();
    cam.cx = 3.7;
    cam.cy = 4.2;
    let splats = vec![
        Splat {
            position: [0.1, -0.05, 0.2],
            opacity: 0.7,
            scale: [0.35, 0.25, 0.3],
            rotation: [0.9, 0.2, -0.3, 0.1],
            sh: (0..16).map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3))).collect(),
        },
        Splat {
            position: [-0.15, 0.1, -0.3],
            opacity: 0.5,
            scale: [0.3, 0.4, 0.28],
            rotation: [0.8, -0.1, 0.25, 0.3],
            sh: (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3))).collect(),
        },
    ];
    let bg = [0.1, 0.3, 0.2];
    let mut w = Image::new(8, 8);
    w.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let (_, tape) = render_splats(&splats, &cam, bg, true).unwrap();
    let grads = render_backward(&splats, &cam, tape.as_ref().unwrap(), &w).unwrap();
    let loss = |s: &[Splat]| weighted(&render_splats(s, &cam, bg, false).unwrap().0, &w);

    let h = 1e-5;
    let check = |analytic: f64, f: &dyn Fn(f64) -> f64, what: &str| {
        let fd = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
        let err = (analytic - fd).abs() / fd.abs().max(1e-8);
        assert!(err <= 1e-4 || (analytic - fd).abs() < 1e-9, "{what}: analytic {analytic} fd {fd}");
    };
    for (i, g) in grads.iter().enumerate() {
        for a in 0..3 {
            check(g.position[a], &|d| {
                let mut s = splats.clone();
                s[i].position[a] += d;
                loss(&s)
            }, &format!("splat {i} position {a}"));
            check(g.scale[a], &|d| {
                let mut s = splats.clone();
                s[i].scale[a] += d;
                loss(&s)
            }, &format!("splat {i} scale {a}"));
        }
        for a in 0..4 {
            check(g.rotation[a], &|d| {
                let mut s = splats.clone();
                s[i].rotation[a] += d;
                loss(&s)
            }, &format!("splat {i} rotation {a}"));
        }
        check(g.opacity, &|d| {
            let mut s = splats.clone();
            s[i].opacity += d;
            loss(&s)
        }, &format!("splat {i} opacity"));
        for j in 0..splats[i].sh.len() {
            for c in 0..3 {
                check(g.sh[j][c], &|d| {
                    let mut s = splats.clone();
                    s[i].sh[j][c] += d;
                    loss(&s)
                }, &format!("splat {i} sh {j}/{c}"));
            }
        }
    }
}

#[test]
fn rendering_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let splats = random_splats(200, &mut rng);
    let cam = front_camera(40);
    let a = render_splats(&splats, &cam, [0.0; 3], false).unwrap().0;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| render_splats(&splats, &cam, [0.0; 3], false).unwrap().0);
    assert_eq!(a, b);
}

#[test]
fn rgb8_roundtrip() {
    let img = Image::from_rgb8(2, 1, &[0, 128, 255, 10, 20, 30]);
    assert_eq!(img.to_rgb8(), vec![0, 128, 255, 10, 20, 30]);
}
