use dewedge_core::rotation::center;
use dewedge_core::volume::fft_freq;
use dewedge_core::*;
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

fn blob(n: usize, sigma: f64) -> Volume<f64> {
    let c = center(n);
    Volume::from_fn(Shape3::cube(n), |z, y, x| {
        let off = [(z as f64 - c - 2.0), (y as f64 - c + 1.0), (x as f64 - c - 3.0)];
        let r2: f64 = off.iter().map(|v| v * v).sum();
        let r2b = (z as f64 - c + 4.0).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c + 2.0).powi(2);
        (-r2 / (2.0 * sigma * sigma)).exp() + 0.6 * (-r2b / (2.0 * sigma * sigma)).exp()
    })
}

#[test]
fn haar_rotations_have_zero_mean_and_uniform_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut mean = [[0.0f64; 3]; 3];
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let r = sample_rotation(&mut rng).matrix();
        for i in 0..3 {
            for j in 0..3 {
                mean[i][j] += r.0[i][j] / n as f64;
            }
        }
        zs.push(r.apply([0.0, 0.0, 1.0])[2]);
    }
    assert!(mean.iter().flatten().all(|m| m.abs() < 0.02), "{mean:?}");
    // Kolmogorov-Smirnov distance to U[-1, 1]
    zs.sort_by(f64::total_cmp);
    let ks = zs
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let f = (z + 1.0) / 2.0;
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS = {ks}");
}

#[test]
fn rotation_round_trip_on_smooth_phantom() {
    let v = blob(32, 4.0);
    let phi = EulerAngles::new(0.7, 1.1, -2.3);
    let back = rotate_volume(&rotate_volume(&v, &phi), &phi.inverse());
    let c = center(32);
    let (mut err, mut sig) = (0.0, 0.0);
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let r2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
                if r2 <= 12.0f64.powi(2) {
                    err += (back.get(z, y, x) - v.get(z, y, x)).powi(2);
                    sig += v.get(z, y, x).powi(2);
                }
            }
        }
    }
    assert!((err / sig).sqrt() < 0.02, "relative RMS {}", (err / sig).sqrt());
}

#[test]
fn quarter_turn_about_z_moves_x_to_y() {
    let n = 9;
    let c = 4;
    let mut v = Volume::<f64>::zeros(Shape3::cube(n));
    v.set(c, c, c + 3, 1.0);
    let r = rotate_volume(&v, &EulerAngles::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
    assert!((r.get(c, c + 3, c) - 1.0).abs() < 1e-9);
    assert!((r.sum() - 1.0).abs() < 1e-9);
}

fn rms(a: &[f64]) -> f64 {
    (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn centered_sphere_projects_the_same_at_every_angle() {
    let n = 48;
    let c = center(n);
    let v = Volume::from_fn(Shape3::cube(n), |z, y, x| {
        let r = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        0.5 * (1.0 - ((r - 12.0) / 1.0).tanh())
    });
    let p: Vec<Vec<f64>> = [0.0, 30.0, 60.0]
        .iter()
        .map(|&a| project(&v, a).unwrap().data.data().to_vec())
        .collect();
    let signal = rms(&p[0]);
    for i in 0..3 {
        for j in i + 1..3 {
            let d: Vec<f64> = p[i].iter().zip(&p[j]).map(|(a, b)| a - b).collect();
            assert!(rms(&d) < 0.02 * signal, "{i} vs {j}: {}", rms(&d) / signal);
        }
    }
}

/// 2D DFT of the projection against the volume spectrum on the rotated
/// central plane, summed directly over x and z.
#[test]
fn projection_matches_fourier_slice_oracle() {
    let n = 64;
    let cfg = PhantomConfig {
        edge_width: 2.0,
        fiducial_count: 0,
        ..Default::default()
    };
    let (v, _) = make_phantom::<f64>(&cfg, 5).unwrap();
    let theta = 30f64.to_radians();
    let p = project(&v, 30.0).unwrap();

    let mut planner = FftPlanner::<f64>::new();
    let f = planner.plan_fft_forward(n);
    // 2D DFT of the projection image (rows y, columns u)
    let mut img: Vec<Complex<f64>> = p.data.data().iter().map(|&x| Complex::new(x, 0.0)).collect();
    for row in img.chunks_mut(n) {
        f.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for u in 0..n {
        for y in 0..n {
            col[y] = img[y * n + u];
        }
        f.process(&mut col);
        for y in 0..n {
            img[y * n + u] = col[y];
        }
    }

    // 1D DFT of the volume along y
    let mut vy = vec![Complex::new(0.0, 0.0); n * n * n];
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for z in 0..n {
        for x in 0..n {
            for y in 0..n {
                line[y] = Complex::new(v.get(z, y, x), 0.0);
            }
            f.process(&mut line);
            for ky in 0..n {
                vy[(z * n + ky) * n + x] = line[ky];
            }
        }
    }
    // u - c = cos(t) (x - c) - sin(t) (z - c), so detector frequency k samples
    // (kx, kz) = (cos t, -sin t) k, with an extra phase for the offset c
    let c = center(n);
    let tau = std::f64::consts::TAU;
    let (s, co) = theta.sin_cos();
    let (mut err, mut tot) = (0.0, 0.0);
    for ku in 0..n {
        let k = fft_freq(ku, n);
        let (kx, kz) = (co * k, -s * k);
        let shift = Complex::from_polar(1.0, -tau * k * c / n as f64);
        let phase: Vec<Complex<f64>> = (0..n * n)
            .map(|i| {
                let (z, x) = (i / n, i % n);
                Complex::from_polar(1.0, -tau * (kx * (x as f64 - c) + kz * (z as f64 - c)) / n as f64)
            })
            .collect();
        for ky in 0..n {
            let mut acc = Complex::new(0.0, 0.0);
            for z in 0..n {
                for x in 0..n {
                    acc += vy[(z * n + ky) * n + x] * phase[z * n + x];
                }
            }
            let oracle = acc * shift;
            err += (img[ky * n + ku] - oracle).norm_sqr();
            tot += oracle.norm_sqr();
        }
    }
    let rel = (err / tot).sqrt();
    assert!(rel < 5e-2, "relative RMS {rel}");
}

#[test]
fn measured_snr_matches_target() {
    let (v, _) = make_phantom::<f64>(&PhantomConfig::default(), 3).unwrap();
    let scheme = TiltScheme::new(-60.0, 60.0, 6.0);
    let noise = NoiseConfig {
        target_snr: 0.25,
        ..Default::default()
    };
    let t = simulate_tilt_series(&v, &scheme, &noise, 9).unwrap();
    let (mut sig, mut nse, mut cnt) = (0.0, 0.0, 0usize);
    for p in t.projections() {
        let clean = project(&v, p.angle).unwrap();
        let cm = clean.data.mean();
        for (&d, &c) in p.data.data().iter().zip(clean.data.data()) {
            sig += (c - cm).powi(2);
            nse += (d - c).powi(2);
            cnt += 1;
        }
    }
    let ratio = sig / nse;
    assert!((ratio / 0.25 - 1.0).abs() < 0.05, "snr {ratio} over {cnt} pixels");
}

#[test]
fn noise_streams_are_independent_across_tilts_and_frames() {
    let mut v = Volume::<f64>::zeros(Shape3::cube(16));
    v.set(8, 8, 8, 1.0);
    let t = simulate_tilt_series(&v, &TiltScheme::new(-2.0, 2.0, 2.0).with_frames(2), &NoiseConfig::default(), 4).unwrap();
    let frames: Vec<Vec<f64>> = t
        .projections()
        .iter()
        .flat_map(|p| {
            let clean = project(&v, p.angle).unwrap();
            p.frames
                .clone()
                .unwrap()
                .into_iter()
                .map(move |f| f.data().iter().zip(clean.data.data()).map(|(a, b)| a - b).collect::<Vec<_>>())
        })
        .collect();
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            let dot: f64 = frames[i].iter().zip(&frames[j]).map(|(a, b)| a * b).sum();
            let norm = (frames[i].iter().map(|a| a * a).sum::<f64>() * frames[j].iter().map(|b| b * b).sum::<f64>()).sqrt();
            assert!((dot / norm).abs() < 0.2, "noise of frames {i} and {j} correlates");
        }
    }
}
