//! File-level inference: WAV in, one WAV per speaker out.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::MossFormer;
use crate::numerics::Scalar;
use crate::wav::{read_wav, write_wav};

/// Errors with a version error when a checkpoint was trained for a
/// different architecture than the one requested.
pub fn check_compatible(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    if expected != found {
        let (a, b) = (expected.to_kv(), found.to_kv());
        let diff: Vec<String> = a
            .lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| format!("requested {x}, checkpoint has {y}"))
            .collect();
        return Err(Error::Version(format!(
            "checkpoint was trained for a different model: {}",
            diff.join("; ")
        )));
    }
    Ok(())
}

/// Separates `input` and writes `<stem>_spk<i>.wav` (i from 1) into
/// `out_dir`, each exactly as long as the input.
pub fn separate_wav<T: Scalar>(
    ckpt: &Checkpoint<T>,
    input: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let model = MossFormer::new(ckpt.model.clone())?;
    let (samples, rate) = read_wav::<T>(input)?;
    if rate != model.cfg.sample_rate {
        return Err(Error::Format(format!(
            "{}: sample rate {rate} Hz, model expects {} Hz",
            input.display(),
            model.cfg.sample_rate
        )));
    }
    let waves = model.separate(&ckpt.params, &samples)?;
    let stem = input
        .file_stem()
        .map_or_else(|| "mixture".into(), |s| s.to_string_lossy().into_owned());
    std::fs::create_dir_all(out_dir).map_err(|source| Error::File {
        path: out_dir.to_path_buf(),
        source,
    })?;
    waves
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let path = out_dir.join(format!("{stem}_spk{}.wav", i + 1));
            write_wav(&path, w, rate)?;
            Ok(path)
        })
        .collect()
}
