//! Support for the `acceptance` test target, which exercises the library
//! crates and the `ihd` binary end to end.

use std::path::PathBuf;
use std::process::Command;

use anyhow::{ensure, Context, Result};

/// Builds the `ihd` binary with the profile of the running test and returns
/// its path.
pub fn ihd_binary() -> Result<PathBuf> {
    let exe = std::env::current_exe()?;
    // target/<profile>/deps/<test binary>
    let profile_dir = exe
        .parent()
        .and_then(|deps| deps.parent())
        .context("test binary is not under a cargo target directory")?;
    let profile = profile_dir.file_name().and_then(|n| n.to_str()).unwrap_or("debug");
    let mut build = Command::new(env!("CARGO"));
    build.args(["build", "--quiet", "-p", "ihd-cli", "--bin", "ihd"]);
    if profile != "debug" {
        build.args(["--profile", profile]);
    }
    let status = build.status().context("running cargo build")?;
    ensure!(status.success(), "building ihd failed");
    let bin = profile_dir.join(format!("ihd{}", std::env::consts::EXE_SUFFIX));
    ensure!(bin.exists(), "{} was not built", bin.display());
    Ok(bin)
}
