use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use strainsim::checks;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read_tree(dir: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path)?);
        }
    }
    Ok(files)
}

/// Two CLI runs of the same spec and seed, compared file by file.
fn determinism() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = configs().join("short.toml");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_strainsim"))
            .arg("run")
            .arg(&spec)
            .arg("--out")
            .arg(&out)
            .args(["--seed", "11"])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("run {run} exited with {}", status.status));
        }
        outputs.push(read_tree(&out).map_err(|e| e.to_string())?);
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    if a.is_empty() {
        return Err("no output files".into());
    }
    if a.keys().ne(b.keys()) {
        return Err("file sets differ".into());
    }
    for (name, bytes) in a {
        if b[name] != *bytes {
            return Err(format!("{name} differs"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut suites = checks::property_suites();
    suites.push(checks::behavioral_suite());
    for suite in &suites {
        let out = suite.execute();
        if !out.passed() {
            failed += 1;
        }
        println!("{}", out.summary());
    }

    let t = Instant::now();
    match determinism() {
        Ok(()) => println!("PASS determinism ({:.1} s)", t.elapsed().as_secs_f64()),
        Err(e) => {
            failed += 1;
            println!("FAIL determinism: {e}");
        }
    }

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
