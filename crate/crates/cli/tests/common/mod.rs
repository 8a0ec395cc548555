use std::path::Path;
use std::process::{Command, Output};

pub const TINY: &[&str] = &[
    "phantom.shape={\"d\":32,\"h\":32,\"w\":32}",
    "phantom.particle_count=4",
    "phantom.radius_range=[3.0,5.0]",
    "phantom.fiducial_count=1",
    "tilt.increment=4.0",
    "extract.cube_size=16",
    "model.base_channels=2",
    "model.depth=1",
    "fit.epochs=2",
    "fit.crop_size=8",
    "fit.batch_size=4",
    "refine.cube_size=16",
    "refine.overlap=8",
    "metrics.particle_cube=8",
];

/// Runs the binary in `dir` with the tiny configuration and `extra` flags.
pub fn dewedge(dir: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dewedge"));
    cmd.args(args).arg("--work-dir").arg(dir).args(extra).env("RUST_LOG", "warn");
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

pub fn pipeline(dir: &Path, extra: &[&str]) {
    for step in ["simulate", "split", "fbp", "fit", "refine", "metrics"] {
        let out = dewedge(dir, &[step], extra);
        assert!(out.status.success(), "{step} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
}
