use std::path::Path;

use nalgebra::Vector3;
use proptest::prelude::*;
use ufo_recon::formats::*;
use ufo_recon::geometry::Camera;
use ufo_recon::vcscore::{Track, TrackSet};
use ufo_tensor::checkpoint;
use ufo_tensor::DenseArray;

fn camera_strategy() -> impl Strategy<Value = Camera> {
    (
        prop::array::uniform3(-10.0f64..10.0),
        prop::array::uniform3(-1.0f64..1.0),
        20.0f64..500.0,
        8usize..200,
        8usize..200,
        0.01f64..5.0,
        0.1f64..50.0,
    )
        .prop_filter_map("degenerate pose", |(eye, target, focal, w, h, dmin, span)| {
            let eye = Vector3::from(eye);
            let target = Vector3::from(target);
            if (eye - target).norm() < 0.5 {
                return None;
            }
            Camera::look_at(eye, target, Vector3::y(), focal, w, h, dmin, dmin + span).ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn camera_text_is_value_identical(cam in camera_strategy()) {
        let text = camera_to_string(&cam);
        let back = parse_camera(&text, cam.width, cam.height, Path::new("cam.txt")).unwrap();
        prop_assert_eq!(&back, &cam);
        prop_assert_eq!(camera_to_string(&back), text);
    }

    #[test]
    fn pnm_is_byte_identical(w in 1usize..20, h in 1usize..20, gray in any::<bool>(), seed in any::<u64>()) {
        let channels = if gray { 1 } else { 3 };
        let data: Vec<u8> = (0..w * h * channels).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let img = ByteImage { width: w, height: h, channels, data };
        let bytes = encode_pnm(&img);
        let back = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_pnm(&back), bytes);
    }

    #[test]
    fn pfm_is_byte_identical(w in 1usize..20, h in 1usize..20, values in prop::collection::vec(-1e6f32..1e6, 400)) {
        let map = FloatMap { width: w, height: h, data: values[..w * h].to_vec() };
        let bytes = encode_pfm(&map);
        let back = decode_pfm(&bytes, Path::new("x.pfm")).unwrap();
        prop_assert_eq!(&back, &map);
        prop_assert_eq!(encode_pfm(&back), bytes);
    }

    #[test]
    fn tracks_are_value_identical(
        raw in prop::collection::vec((prop::array::uniform3(-100.0f64..100.0), prop::collection::btree_set(0usize..64, 2..8)), 0..30)
    ) {
        let tracks = TrackSet {
            tracks: raw.into_iter().map(|(p, v)| Track { position: Vector3::from(p), views: v.into_iter().collect() }).collect(),
        };
        let text = tracks_to_string(&tracks);
        let back = parse_tracks(&text, Path::new("tracks.txt")).unwrap();
        prop_assert_eq!(&back, &tracks);
        prop_assert_eq!(tracks_to_string(&back), text);
    }

    #[test]
    fn checkpoints_are_value_identical(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..6), seed in any::<u64>()) {
        let records: Vec<(String, DenseArray<f32>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let arr = DenseArray::from_fn(s, |j| ((seed as f64 + j as f64 * 0.37 + i as f64).sin()) as f32);
                (format!("layer{i}.w"), arr)
            })
            .collect();
        let bytes = checkpoint::encode(&records);
        let back = checkpoint::decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cam = Camera::look_at(Vector3::new(0.3, 0.5, -4.0), Vector3::zeros(), Vector3::y(), 60.0, 32, 24, 1.0, 7.0).unwrap();
    let p = dir.path().join("cams/0000_cam.txt");
    write_camera(&p, &cam).unwrap();
    assert_eq!(read_camera(&p, 32, 24).unwrap(), cam);

    let img = ByteImage { width: 3, height: 2, channels: 3, data: (0..18).map(|i| i * 13).collect() };
    let p = dir.path().join("a.ppm");
    write_pnm(&p, &img).unwrap();
    let first = std::fs::read(&p).unwrap();
    write_pnm(&p, &read_pnm(&p).unwrap()).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let map = FloatMap { width: 2, height: 3, data: vec![0.5, 1.5, -2.0, 0.0, 3.25, 9.0] };
    let p = dir.path().join("a.pfm");
    write_pfm(&p, &map).unwrap();
    let first = std::fs::read(&p).unwrap();
    write_pfm(&p, &read_pfm(&p).unwrap()).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let recs = vec![("w".to_string(), DenseArray::<f64>::from_fn(&[2, 2], |i| i as f64 / 3.0))];
    let p = dir.path().join("c.bin");
    checkpoint::save(&p, &recs).unwrap();
    assert_eq!(checkpoint::load::<f64>(&p).unwrap(), recs);
}
