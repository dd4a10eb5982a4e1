//! Drives the command-line pipeline from a TOML config: calibrate, then a
//! single run, writing into a scratch output directory.

use conformal_smpc::cli::{cmd_calibrate, cmd_run, CommonArgs, RunArgs};
use conformal_smpc::config::RunConfig;
use conformal_smpc::Result;

pub fn run() -> Result<Vec<String>> {
    let dir = std::env::temp_dir().join(format!("csmpc-pipeline-{}", std::process::id()));
    let cfg = RunConfig { output_dir: dir.join("out"), ..RunConfig::default() };
    let config_path = dir.join("experiment.toml");
    conformal_smpc::io::write_atomic(&config_path, cfg.to_toml()?.as_bytes())?;

    let common = || CommonArgs { config: config_path.clone(), mode: None, seed: Some(3), out: None };
    print!("{}", cmd_calibrate(&common())?);
    print!("{}", cmd_run(&RunArgs { common: common(), zero_noise: false })?);

    let mut files: Vec<String> = std::fs::read_dir(cfg.output_dir.join("run_state"))
        .map_err(|e| conformal_smpc::Error::Io { path: dir.display().to_string(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!("run outputs: {files:?}");
    let _ = std::fs::remove_dir_all(&dir);
    Ok(files)
}

fn main() -> Result<()> {
    run().map(|_| ())
}
