// SPDX-License-Identifier: MIT OR Apache-2.0

//! Function-vector files: UTF-8 JSON, one vector per file, components
//! serialized to 9 significant decimal digits (enough to round-trip f32
//! exactly).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::fv::{ExtractionConfig, FunctionVector};
use crate::math::tensor::Tensor;
use crate::model::HeadId;
use crate::util::{hex64, parse_hex64};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FvFile {
    task: String,
    checkpoint_digest: String,
    k: usize,
    d_model: usize,
    heads: Vec<[usize; 2]>,
    vector: Vec<f64>,
    extraction: ExtractionConfig,
}

/// Round to 9 significant decimal digits.
fn sig9(x: f32) -> f64 {
    format!("{x:.8e}").parse::<f64>().expect("formatted float")
}

pub fn export_fv(fv: &FunctionVector, path: impl AsRef<Path>) -> Result<()> {
    let file = FvFile {
        task: fv.task.clone(),
        checkpoint_digest: hex64(fv.checkpoint_digest),
        k: fv.heads.len(),
        d_model: fv.d_model(),
        heads: fv.heads.iter().map(|h| [h.layer, h.head]).collect(),
        vector: fv.vector.data().iter().map(|&v| sig9(v)).collect(),
        extraction: fv.extraction.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn import_fv(path: impl AsRef<Path>) -> Result<FunctionVector> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: FvFile = serde_json::from_str(&text)
        .map_err(|e| FvError::Format(format!("function-vector file: {e}")))?;
    if file.heads.len() != file.k {
        return Err(FvError::Format(format!(
            "k {} but {} heads listed",
            file.k,
            file.heads.len()
        )));
    }
    if file.vector.len() != file.d_model {
        return Err(FvError::Format(format!(
            "d_model {} but vector has {} components",
            file.d_model,
            file.vector.len()
        )));
    }
    let digest = parse_hex64(&file.checkpoint_digest)
        .ok_or_else(|| FvError::Format("checkpoint_digest is not 64-bit hex".into()))?;
    let data: Vec<f32> = file.vector.iter().map(|&v| v as f32).collect();
    let vector = Tensor::new(vec![file.d_model], data)?;
    Ok(FunctionVector {
        task: file.task,
        heads: file.heads.iter().map(|&[l, h]| HeadId::new(l, h)).collect(),
        vector,
        checkpoint_digest: digest,
        extraction: file.extraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionPolicy;

    fn sample_fv() -> FunctionVector {
        FunctionVector {
            task: "en-l1".into(),
            heads: vec![HeadId::new(1, 0), HeadId::new(0, 3)],
            vector: Tensor::new(vec![4], vec![0.25, -1.5e-3, 3.0, 0.125]).unwrap(),
            checkpoint_digest: 0xdead_beef_0123_4567,
            extraction: ExtractionConfig {
                n_demos: 4,
                n_prompts: 64,
                k: 2,
                position: PositionPolicy::Final,
            },
        }
    }

    #[test]
    fn round_trip_exact() {
        let fv = sample_fv();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fv.json");
        export_fv(&fv, &path).unwrap();
        let back = import_fv(&path).unwrap();
        assert_eq!(back.task, fv.task);
        assert_eq!(back.heads, fv.heads);
        assert_eq!(back.checkpoint_digest, fv.checkpoint_digest);
        assert_eq!(back.extraction, fv.extraction);
        for (a, b) in back.vector.data().iter().zip(fv.vector.data().iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn schema_violation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"task\": \"x\", \"mystery\": 1}").unwrap();
        assert!(import_fv(&path).is_err());
    }

    #[test]
    fn k_mismatch_rejected() {
        let fv = sample_fv();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fv.json");
        export_fv(&fv, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bad = text.replace("\"k\": 2", "\"k\": 3");
        std::fs::write(&path, bad).unwrap();
        assert!(import_fv(&path).is_err());
    }

    #[test]
    fn sig9_round_trips_f32() {
        for v in [1.0f32, -0.3333333, 1.2345678e-20, 7.77e18] {
            assert_eq!(sig9(v) as f32, v);
        }
    }
}
