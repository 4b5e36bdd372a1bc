//! Shared fixtures for the integration tests: random rigs and a brute-force
//! view-combination oracle written independently of the library.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use ufo_recon::geometry::Camera;
use ufo_recon::vcscore::{Track, TrackSet};

pub const THETA0: f64 = 5.0;
pub const SIGMA1: f64 = 1.0;
pub const SIGMA2: f64 = 10.0;

/// Cameras on a spherical cap (up to 50 degrees from the rig axis) looking
/// at the origin, plus tracks in the unit ball with random visibility sets
/// of size >= 2.
pub fn random_rig(rng: &mut impl Rng, max_cams: usize, max_tracks: usize) -> (Vec<Camera>, TrackSet) {
    let n = rng.random_range(3..=max_cams);
    let cams = (0..n)
        .map(|_| {
            let az: f64 = rng.random_range(0.0..2.0 * PI);
            let polar: f64 = rng.random_range(0.0..50f64.to_radians());
            let r: f64 = rng.random_range(3.0..6.0);
            let eye = Vector3::new(r * polar.sin() * az.cos(), r * polar.sin() * az.sin(), r * polar.cos());
            let up = if polar < 1e-3 { Vector3::y() } else { Vector3::z() };
            Camera::look_at(eye, Vector3::zeros(), up, 50.0, 32, 32, 0.5, r + 2.0).unwrap()
        })
        .collect();
    let m = rng.random_range(0..=max_tracks);
    let tracks = (0..m)
        .map(|_| {
            let position = loop {
                let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if p.norm() <= 1.0 {
                    break p;
                }
            };
            let mut views: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
            while views.len() < 2 {
                let v = rng.random_range(0..n);
                if !views.contains(&v) {
                    views.push(v);
                }
            }
            views.sort_unstable();
            Track { position, views }
        })
        .collect();
    (cams, TrackSet { tracks })
}

fn centre(cam: &Camera) -> [f64; 3] {
    // C = -R^T t, written out by hand.
    let e = &cam.extrinsic;
    let mut c = [0.0; 3];
    for (i, ci) in c.iter_mut().enumerate() {
        *ci = -(0..3).map(|r| e[(r, i)] * e[(r, 3)]).sum::<f64>();
    }
    c
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Angle at `p` of the triangle (ci, p, cj), from the law of cosines.
fn angle_deg(ci: [f64; 3], cj: [f64; 3], p: [f64; 3]) -> f64 {
    let a = dist(ci, p);
    let b = dist(cj, p);
    let c = dist(ci, cj);
    let cos = ((a * a + b * b - c * c) / (2.0 * a * b)).clamp(-1.0, 1.0);
    cos.acos() * 180.0 / PI
}

fn kernel(theta: f64) -> f64 {
    let s = if theta <= THETA0 { SIGMA1 } else { SIGMA2 };
    (-(theta - THETA0).powi(2) / (2.0 * s * s)).exp()
}

pub fn oracle_pair(i: usize, j: usize, cams: &[Camera], tracks: &TrackSet) -> f64 {
    let (ci, cj) = (centre(&cams[i]), centre(&cams[j]));
    tracks
        .tracks
        .iter()
        .filter(|t| t.views.contains(&i) && t.views.contains(&j))
        .map(|t| kernel(angle_deg(ci, cj, [t.position.x, t.position.y, t.position.z])))
        .sum()
}

pub fn oracle_vc(views: &[usize], cams: &[Camera], tracks: &TrackSet) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            total += oracle_pair(views[a], views[b], cams, tracks);
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn subsets(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for v in start..n {
        cur.push(v);
        subsets(n, k, v + 1, cur, out);
        cur.pop();
    }
}

/// Every k-subset of `0..n`, scored and sorted by descending score with
/// lexicographic ties.
pub fn oracle_ranking(n: usize, k: usize, cams: &[Camera], tracks: &TrackSet) -> Vec<(Vec<usize>, f64)> {
    let mut all = Vec::new();
    subsets(n, k, 0, &mut Vec::new(), &mut all);
    let mut scored: Vec<(Vec<usize>, f64)> = all.into_iter().map(|c| {
        let s = oracle_vc(&c, cams, tracks);
        (c, s)
    }).collect();
    // Plain insertion sort, independent of the library comparator.
    for i in 1..scored.len() {
        let mut j = i;
        while j > 0 && before(&scored[j], &scored[j - 1]) {
            scored.swap(j, j - 1);
            j -= 1;
        }
    }
    scored
}

fn before(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> bool {
    // Relative tolerance absorbs rounding between the two formulations.
    if (a.1 - b.1).abs() > 1e-12 * a.1.abs().max(b.1.abs()) {
        a.1 > b.1
    } else {
        a.0 < b.0
    }
}

/// Tercile sizes by hand: remainder goes to the first groups.
pub fn oracle_terciles(n: usize) -> [usize; 3] {
    match n % 3 {
        0 => [n / 3, n / 3, n / 3],
        1 => [n / 3 + 1, n / 3, n / 3],
        _ => [n / 3 + 1, n / 3 + 1, n / 3],
    }
}
