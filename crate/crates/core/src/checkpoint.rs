//! Versioned training checkpoints: one JSON container holding named
//! parameter arrays for the student and both teachers, the architecture
//! descriptor, optimizer momentum, counters, and the base RNG seed.
//!
//! Values are stored as f64, which embeds f32 exactly, so save/load
//! round-trips are bit-identical in either precision.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, SegModel};
use crate::scalar::Scalar;
use crate::teachers::{Cursor, TeacherPair};

pub const CKPT_VERSION: &str = "psmt-ckpt-1";

/// On-disk checkpoint layout. Keys inside the maps are
/// `<model>/<layer>.<tensor>`, e.g. `student/encoder.conv1.weight` or
/// `teacher2/decoder.proj.bias`; momentum entries live under `momentum/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub version: String,
    pub arch_descriptor: ArchDescriptor,
    pub seed: u64,
    pub epoch: usize,
    pub iter: u64,
    pub ema_cursor: Cursor,
    pub params: BTreeMap<String, Vec<f64>>,
    pub buffers: BTreeMap<String, Vec<f64>>,
    pub momentum: BTreeMap<String, Vec<f64>>,
}

fn pack_model<T: Scalar>(
    model: &SegModel<T>,
    prefix: &str,
    params: &mut BTreeMap<String, Vec<f64>>,
    buffers: &mut BTreeMap<String, Vec<f64>>,
) {
    for span in model.arch.param_layout() {
        let slice = &model.params[span.offset..span.offset + span.len];
        params.insert(
            format!("{prefix}/{}", span.name),
            slice.iter().map(|v| v.to_f64_c()).collect(),
        );
    }
    for span in model.arch.buffer_layout() {
        let slice = &model.buffers[span.offset..span.offset + span.len];
        buffers.insert(
            format!("{prefix}/{}", span.name),
            slice.iter().map(|v| v.to_f64_c()).collect(),
        );
    }
}

fn unpack_model<T: Scalar>(
    arch: &ArchDescriptor,
    prefix: &str,
    params: &BTreeMap<String, Vec<f64>>,
    buffers: &BTreeMap<String, Vec<f64>>,
) -> Result<SegModel<T>> {
    let mut model = SegModel::zeros(arch.clone())?;
    for span in arch.param_layout() {
        let key = format!("{prefix}/{}", span.name);
        let arr = params
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter array {key}")))?;
        if arr.len() != span.len {
            return Err(Error::Checkpoint(format!(
                "array {key} holds {} values, expected {}",
                arr.len(),
                span.len
            )));
        }
        for (dst, &v) in model.params[span.offset..span.offset + span.len]
            .iter_mut()
            .zip(arr)
        {
            *dst = T::from_f64_c(v);
        }
    }
    for span in arch.buffer_layout() {
        let key = format!("{prefix}/{}", span.name);
        let arr = buffers
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer array {key}")))?;
        if arr.len() != span.len {
            return Err(Error::Checkpoint(format!(
                "array {key} holds {} values, expected {}",
                arr.len(),
                span.len
            )));
        }
        for (dst, &v) in model.buffers[span.offset..span.offset + span.len]
            .iter_mut()
            .zip(arr)
        {
            *dst = T::from_f64_c(v);
        }
    }
    Ok(model)
}

/// Assemble the container from live training objects.
pub fn build_checkpoint<T: Scalar>(
    student: &SegModel<T>,
    pair: &TeacherPair<T>,
    velocity: &[T],
    seed: u64,
    epoch: usize,
    iter: u64,
) -> CheckpointFile {
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    pack_model(student, "student", &mut params, &mut buffers);
    pack_model(&pair.t1, "teacher1", &mut params, &mut buffers);
    pack_model(&pair.t2, "teacher2", &mut params, &mut buffers);
    let mut momentum = BTreeMap::new();
    for span in student.arch.param_layout() {
        momentum.insert(
            format!("momentum/{}", span.name),
            velocity[span.offset..span.offset + span.len]
                .iter()
                .map(|v| v.to_f64_c())
                .collect(),
        );
    }
    CheckpointFile {
        version: CKPT_VERSION.to_string(),
        arch_descriptor: student.arch.clone(),
        seed,
        epoch,
        iter,
        ema_cursor: pair.cursor,
        params,
        buffers,
        momentum,
    }
}

/// Everything needed to resume training.
#[derive(Debug, Clone)]
pub struct RestoredState<T: Scalar> {
    pub student: SegModel<T>,
    pub pair: TeacherPair<T>,
    pub velocity: Vec<T>,
    pub seed: u64,
    pub epoch: usize,
    pub iter: u64,
}

/// Rebuild live objects from a container; `gamma` is supplied by the run
/// configuration because it is a schedule constant, not state.
pub fn restore_checkpoint<T: Scalar>(file: &CheckpointFile, gamma: f64) -> Result<RestoredState<T>> {
    if file.version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {:?}, expected {CKPT_VERSION:?}",
            file.version
        )));
    }
    file.arch_descriptor.validate()?;
    let arch = &file.arch_descriptor;
    let student: SegModel<T> = unpack_model(arch, "student", &file.params, &file.buffers)?;
    let t1 = unpack_model(arch, "teacher1", &file.params, &file.buffers)?;
    let t2 = unpack_model(arch, "teacher2", &file.params, &file.buffers)?;
    let mut pair = TeacherPair::from_student(&student, gamma)?;
    pair.t1 = t1;
    pair.t2 = t2;
    pair.cursor = file.ema_cursor;
    let mut velocity = vec![T::zero(); student.params.len()];
    for span in arch.param_layout() {
        let key = format!("momentum/{}", span.name);
        let arr = file
            .momentum
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing momentum array {key}")))?;
        if arr.len() != span.len {
            return Err(Error::Checkpoint(format!(
                "array {key} holds {} values, expected {}",
                arr.len(),
                span.len
            )));
        }
        for (dst, &v) in velocity[span.offset..span.offset + span.len].iter_mut().zip(arr) {
            *dst = T::from_f64_c(v);
        }
    }
    Ok(RestoredState {
        student,
        pair,
        velocity,
        seed: file.seed,
        epoch: file.epoch,
        iter: file.iter,
    })
}

pub fn save_checkpoint(file: &CheckpointFile, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_vec(file)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_setup(seed: u64) -> (SegModel<f32>, TeacherPair<f32>, Vec<f32>) {
        let student = SegModel::init(ArchDescriptor::default(), seed).unwrap();
        let mut pair = TeacherPair::from_student(&student, 0.99).unwrap();
        pair.t2 = SegModel::init(ArchDescriptor::default(), seed + 9).unwrap();
        pair.cursor = Cursor::T2;
        let velocity: Vec<f32> = (0..student.params.len())
            .map(|i| (i as f32 * 0.37).sin() * 1e-3)
            .collect();
        (student, pair, velocity)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (student, pair, velocity) = toy_setup(11);
        let file = build_checkpoint(&student, &pair, &velocity, 7, 12, 768);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&file, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let restored: RestoredState<f32> = restore_checkpoint(&loaded, 0.99).unwrap();

        assert_eq!(restored.student.params, student.params);
        assert_eq!(restored.student.buffers, student.buffers);
        assert_eq!(restored.pair.t1.params, pair.t1.params);
        assert_eq!(restored.pair.t2.params, pair.t2.params);
        assert_eq!(restored.pair.cursor, Cursor::T2);
        assert_eq!(restored.velocity, velocity);
        assert_eq!((restored.seed, restored.epoch, restored.iter), (7, 12, 768));
    }

    #[test]
    fn f64_values_survive_exactly() {
        let student = SegModel::<f64>::init(ArchDescriptor::default(), 3).unwrap();
        let pair = TeacherPair::from_student(&student, 0.5).unwrap();
        let velocity = vec![0.1f64; student.params.len()];
        let file = build_checkpoint(&student, &pair, &velocity, 1, 0, 0);
        let json = serde_json::to_string(&file).unwrap();
        let back: CheckpointFile = serde_json::from_str(&json).unwrap();
        let restored: RestoredState<f64> = restore_checkpoint(&back, 0.5).unwrap();
        assert_eq!(restored.student.params, student.params);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (student, pair, velocity) = toy_setup(1);
        let mut file = build_checkpoint(&student, &pair, &velocity, 1, 0, 0);
        file.version = "psmt-ckpt-0".into();
        let err = restore_checkpoint::<f32>(&file, 0.99).unwrap_err();
        assert!(err.to_string().contains("psmt-ckpt-0"));
    }

    #[test]
    fn missing_array_is_named() {
        let (student, pair, velocity) = toy_setup(2);
        let mut file = build_checkpoint(&student, &pair, &velocity, 1, 0, 0);
        file.params.remove("teacher2/decoder.proj.bias");
        let err = restore_checkpoint::<f32>(&file, 0.99).unwrap_err();
        assert!(err.to_string().contains("teacher2/decoder.proj.bias"));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let (student, pair, velocity) = toy_setup(3);
        let mut file = build_checkpoint(&student, &pair, &velocity, 1, 0, 0);
        file.params.get_mut("student/encoder.conv1.bias").unwrap().pop();
        assert!(restore_checkpoint::<f32>(&file, 0.99).is_err());
    }

    #[test]
    fn key_names_follow_the_documented_scheme() {
        let (student, pair, velocity) = toy_setup(4);
        let file = build_checkpoint(&student, &pair, &velocity, 1, 0, 0);
        for model in ["student", "teacher1", "teacher2"] {
            assert!(file.params.contains_key(&format!("{model}/encoder.conv1.weight")));
            assert!(file.params.contains_key(&format!("{model}/decoder.proj.weight")));
        }
        assert!(file.momentum.contains_key("momentum/encoder.conv2.bias"));
        // default arch runs without batch norm, so no buffers
        assert!(file.buffers.is_empty());
    }
}
