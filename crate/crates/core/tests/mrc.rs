use dewedge_core::mrc::{angles_path, encode_mrc, read_stack};
use dewedge_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;

fn random_volume(shape: Shape3, seed: u64) -> Volume<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(shape, |_, _, _| rng.random_range(-10.0..10.0))
}

fn word(bytes: &[u8], i: usize) -> i32 {
    i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap())
}

#[test]
fn volume_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.mrc");
    let v = random_volume(Shape3::cube(32), 1).with_voxel_size(13.5);
    write_volume(&v, &path).unwrap();
    let back: Volume<f32> = read_volume(&path).unwrap();
    assert_eq!(back.shape(), v.shape());
    assert_eq!(back.voxel_size(), 13.5);
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    match read_mrc::<f32>(&path).unwrap() {
        MrcContent::Volume(w) => assert_eq!(w, back),
        MrcContent::TiltSeries(_) => panic!("no angle file was written"),
    }
}

#[test]
fn header_holds_the_grid_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.mrc");
    write_volume(&random_volume(Shape3::new(5, 6, 7), 2), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    // nx, ny, nz with x fastest
    assert_eq!((word(&bytes, 0), word(&bytes, 1), word(&bytes, 2)), (7, 6, 5));
    assert_eq!(word(&bytes, 3), 2);
    assert_eq!(&bytes[208..212], b"MAP ");
    assert_eq!(bytes.len(), 1024 + 4 * 5 * 6 * 7);
}

#[test]
fn identical_volumes_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume(Shape3::cube(12), 3);
    let (a, b) = (dir.path().join("a.mrc"), dir.path().join("b.mrc"));
    write_volume(&v, &a).unwrap();
    write_volume(&v, &b).unwrap();
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn other_modes_and_damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.mrc");
    write_volume(&random_volume(Shape3::cube(4), 4), &path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut mode1 = good.clone();
    mode1[12..16].copy_from_slice(&1i32.to_le_bytes());
    fs::write(&path, &mode1).unwrap();
    assert!(matches!(read_volume::<f32>(&path), Err(Error::UnsupportedMode(1))));

    fs::write(&path, &good[..good.len() - 4]).unwrap();
    assert!(matches!(read_volume::<f32>(&path), Err(Error::Format(_))));
    fs::write(&path, &good[..512]).unwrap();
    assert!(matches!(read_volume::<f32>(&path), Err(Error::Format(_))));
    let mut longer = good.clone();
    longer.extend_from_slice(&[0; 8]);
    fs::write(&path, &longer).unwrap();
    assert!(matches!(read_volume::<f32>(&path), Err(Error::Format(_))));
    assert!(read_volume::<f32>(dir.path().join("missing.mrc")).is_err());
}

#[test]
fn stack_with_angle_file_loads_as_a_tilt_series() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tilts.mrc");
    let (n, h, w) = (41, 8, 10);
    let data: Vec<f32> = (0..n * h * w).map(|i| (i % 97) as f32 * 0.25).collect();
    fs::write(&path, encode_mrc(Shape3::new(n, h, w), 2.0, &data, false).unwrap()).unwrap();
    let angles: String = (0..n).map(|k| format!("{:.2}\n", -60.0 + 3.0 * k as f64)).collect();
    fs::write(angles_path(&path), angles).unwrap();

    let t = match read_mrc::<f32>(&path).unwrap() {
        MrcContent::TiltSeries(t) => t,
        MrcContent::Volume(_) => panic!("angle file ignored"),
    };
    assert_eq!(t.len(), 41);
    assert_eq!(t.projections()[0].angle, -60.0);
    assert_eq!(t.projections()[40].angle, 60.0);
    assert_eq!(t.projections()[1].data.get(0, 3), data[h * w + 3]);
    assert_eq!(read_stack(&path).unwrap().shape, Shape3::new(n, h, w));

    fs::write(angles_path(&path), "0\n1\n").unwrap();
    assert!(read_mrc::<f32>(&path).is_err());
}

#[test]
fn tilt_series_with_frames_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.mrc");
    let v = random_volume(Shape3::cube(8), 5).cast::<f64>();
    let t = simulate_tilt_series(&v, &TiltScheme::new(-30.0, 30.0, 15.0).with_frames(2), &NoiseConfig::default(), 6).unwrap();
    write_tilt_series(&t, &path).unwrap();
    let back: TiltSeries<f64> = read_tilt_series(&path).unwrap();
    assert_eq!(back.len(), t.len());
    for (p, q) in t.projections().iter().zip(back.projections()) {
        assert_eq!(p.angle, q.angle);
        assert_eq!(q.frames.as_ref().unwrap().len(), 2);
        for (a, b) in p.data.data().iter().zip(q.data.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
