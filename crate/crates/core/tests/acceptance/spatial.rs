//! Neighbor search and sampling against brute force; projection and lifting against
//! an independent pinhole implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tasa_core::bridge::PixelMask2D;
use tasa_core::lift::{lift_mask, project_point, Projection};
use tasa_core::net::{fps_downsample, knn_neighbors};
use tasa_core::scene::{CameraFrame, DepthMap, PointCloud};
use tasa_core::spatial::SpatialIndex;
use tasa_core::synth::look_at;

use crate::oracle::{brute_fps, brute_knn};
use crate::{ensure, Outcome};

/// Clouds of assorted sizes; some are snapped to a coarse grid or contain duplicated
/// points so that distance ties are common.
fn random_cloud(rng: &mut ChaCha8Rng, m: usize) -> Vec<[f64; 3]> {
    let snap = rng.gen_bool(0.3);
    let mut pts: Vec<[f64; 3]> = (0..m)
        .map(|_| {
            let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if snap {
                p.map(|v| (v * 4.0).round() / 4.0)
            } else {
                p
            }
        })
        .collect();
    if m > 2 && rng.gen_bool(0.3) {
        for _ in 0..m / 10 + 1 {
            let (a, b) = (rng.gen_range(0..m), rng.gen_range(0..m));
            pts[a] = pts[b];
        }
    }
    pts
}

pub fn knn_fps_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a11);
    let clouds = 200;
    let (mut knn_queries, mut fps_picks, mut largest) = (0usize, 0usize, 0usize);
    for c in 0..clouds {
        // Sizes spread over 1..=5000 with a bias towards small clouds.
        let m = if c % 20 == 0 { 5000 } else { (rng.gen_range(0.0f64..1.0).powi(3) * 5000.0) as usize + 1 };
        largest = largest.max(m);
        let pts = random_cloud(&mut rng, m);
        let index = SpatialIndex::build(pts.clone());
        let k = rng.gen_range(1..=m.min(20));
        let queries: Vec<[f64; 3]> = if m <= 300 {
            pts.clone()
        } else {
            (0..60)
                .map(|i| {
                    if i % 2 == 0 {
                        pts[rng.gen_range(0..m)]
                    } else {
                        std::array::from_fn(|_| rng.gen_range(-1.2..1.2))
                    }
                })
                .collect()
        };
        for q in &queries {
            let got: Vec<usize> = index.knn(q, k).into_iter().map(|n| n.index).collect();
            let want = brute_knn(&pts, q, k);
            ensure!(got == want, "cloud {c} (M={m}, k={k}) query {q:?}: index {got:?} vs brute {want:?}");
            knn_queries += 1;
        }
        if m <= 300 {
            let table = knn_neighbors(&pts, k).map_err(|e| e.to_string())?;
            for (i, q) in pts.iter().enumerate() {
                ensure!(
                    table[i * k..(i + 1) * k] == brute_knn(&pts, q, k)[..],
                    "cloud {c}: neighbor table row {i} differs"
                );
            }
        }

        let sample = if m <= 400 { rng.gen_range(1..=m) } else { rng.gen_range(1..=m.min(120)) };
        let seed: u64 = rng.gen();
        let got = fps_downsample(&pts, sample, seed);
        let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..m);
        let want = brute_fps(&pts, sample, start);
        ensure!(got == want, "cloud {c} (M={m}, m={sample}): fps {got:?} vs brute {want:?}");
        fps_picks += sample;
    }
    Ok(format!(
        "{clouds} clouds (M up to {largest}), {knn_queries} k-NN queries and {fps_picks} FPS picks identical to brute force"
    ))
}

fn pinhole(frame: &CameraFrame, p: &[f64; 3]) -> Option<(f64, f64, f64)> {
    let (r, t, k) = (&frame.rotation, &frame.translation, &frame.intrinsics);
    let cam: [f64; 3] = std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i]);
    (cam[2] > 0.0).then(|| {
        // Homogeneous K·x_cam, then the perspective divide.
        let u = (k[0][0] * cam[0] + k[0][1] * cam[1] + k[0][2] * cam[2]) / cam[2];
        let v = (k[1][1] * cam[1] + k[1][2] * cam[2]) / cam[2];
        (u, v, cam[2])
    })
}

fn pixel_of(frame: &CameraFrame, u: f64, v: f64) -> Option<(u32, u32)> {
    (u >= 0.0 && v >= 0.0 && u < frame.width as f64 && v < frame.height as f64).then_some((u as u32, v as u32))
}

fn frame(intrinsics: [[f64; 3]; 3], rotation: [[f64; 3]; 3], translation: [f64; 3], w: u32, h: u32) -> CameraFrame {
    CameraFrame {
        id: "f".into(),
        intrinsics,
        rotation,
        translation,
        width: w,
        height: h,
        image_path: "f.png".into(),
        depth_path: None,
        depth: None,
    }
}

pub fn projection_round_trip() -> Outcome {
    let hand = frame(
        [[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]],
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0.0; 3],
        640,
        480,
    );
    match project_point(&[0.4, 0.0, 2.0], &hand) {
        Projection::Visible { u, v, z } => {
            ensure!(u == 420.0 && v == 240.0 && z == 2.0, "hand case gave u={u}, v={v}, z={z}")
        }
        Projection::Behind => return Err("hand case projected behind the camera".into()),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0);
    let (mut lifted_total, mut cases) = (0usize, 0usize);
    for case in 0..60 {
        let n = rng.gen_range(50..1500);
        let pts: Vec<[f32; 3]> =
            (0..n).map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3)]).collect();
        let cloud = PointCloud::new("c", pts, None).map_err(|e| e.to_string())?;
        let (w, h) = (rng.gen_range(16..120), rng.gen_range(16..90));
        let f = rng.gen_range(20.0..150.0);
        let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        let dist = rng.gen_range(0.6..2.0);
        let eye = dir.map(|v| v / norm * dist);
        let (rotation, translation) = look_at(eye, [0.0, 0.0, 0.0]);
        let mut cam =
            frame([[f, 0.0, w as f64 / 2.0], [0.0, f, h as f64 / 2.0], [0.0, 0.0, 1.0]], rotation, translation, w, h);
        let depth_tol = rng.gen_range(0.005..0.05);

        // Independent visibility: nearest projecting depth per pixel.
        let proj: Vec<Option<(u32, u32, f64)>> = (0..cloud.len())
            .map(|i| {
                let (u, v, z) = pinhole(&cam, &cloud.point(i))?;
                pixel_of(&cam, u, v).map(|(c, r)| (c, r, z))
            })
            .collect();
        let mut zbuf = vec![f64::INFINITY; (w * h) as usize];
        for &(c, r, z) in proj.iter().flatten() {
            let s = &mut zbuf[(r * w + c) as usize];
            *s = s.min(z);
        }
        let with_depth = case % 2 == 1;
        if with_depth {
            // A measured depth map: the z-buffer perturbed, with holes stored as 0.
            let values: Vec<f32> = zbuf
                .iter()
                .map(
                    |&z| if z.is_finite() && rng.gen_bool(0.9) { (z + rng.gen_range(-0.03..0.03)) as f32 } else { 0.0 },
                )
                .collect();
            cam.depth = Some(DepthMap::new(w, h, values).map_err(|e| e.to_string())?);
        }
        let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
        let mask = PixelMask2D::new("f", w, h, bits.clone()).map_err(|e| e.to_string())?;

        let lifted = lift_mask(&mask, &cam, &cloud, depth_tol).map_err(|e| e.to_string())?;
        let expected: Vec<usize> = (0..cloud.len())
            .filter(|&i| {
                let Some((c, r, z)) = proj[i] else { return false };
                if !bits[(r * w + c) as usize] {
                    return false;
                }
                match &cam.depth {
                    Some(d) => d.at(c, r).is_some_and(|dv| (z - dv).abs() <= depth_tol),
                    None => z - zbuf[(r * w + c) as usize] <= depth_tol,
                }
            })
            .collect();
        for &i in &lifted {
            let Some((u, v, _)) = pinhole(&cam, &cloud.point(i)) else {
                return Err(format!("case {case}: lifted point {i} is behind the camera"));
            };
            let Some((c, r)) = pixel_of(&cam, u, v) else {
                return Err(format!("case {case}: lifted point {i} re-projects outside the image"));
            };
            ensure!(bits[(r * w + c) as usize], "case {case}: lifted point {i} re-projects onto an unset pixel");
            ensure!(
                project_point(&cloud.point(i), &cam).pixel(&cam) == Some((c, r)),
                "case {case}: library and reference pixels differ for point {i}"
            );
        }
        ensure!(
            lifted == expected,
            "case {case} (depth map: {with_depth}): lifted {} points, reference visibility gives {}",
            lifted.len(),
            expected.len()
        );
        lifted_total += lifted.len();
        cases += 1;
    }
    Ok(format!(
        "hand case u=420, v=240 exact; {cases} random cameras, {lifted_total} lifted points all re-project onto set pixels and match reference visibility"
    ))
}
