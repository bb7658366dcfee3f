//! Named parameter tensors, AdamW, and the checkpoint archive.
//!
//! A checkpoint is two files: `<stem>.bin` holds every tensor back to back as
//! little-endian scalars, `<stem>.json` is the manifest (dtype, names, shapes,
//! byte offsets, plus free-form metadata).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// A fixed, ordered collection of named tensors. Gradients use the same type.
pub trait ParamSet<T: Scalar>: Clone {
    /// (name, shape, data) in a stable order.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])>;
    /// Mutable data slices in the same order as [`ParamSet::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    fn axpy(&mut self, scale: T, other: &Self) {
        let src: Vec<Vec<T>> = other.tensors().iter().map(|t| t.2.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn l2_norm(&self) -> T {
        self.tensors().iter().flat_map(|t| t.2.iter()).map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Manifest entry for a matrix-shaped tensor.
pub fn mat_entry<'a, T: Scalar>(name: &str, m: &'a crate::linalg::Mat<T>) -> (String, Vec<usize>, &'a [T]) {
    (name.to_string(), vec![m.rows(), m.cols()], m.as_slice())
}

pub fn vec_entry<'a, T: Scalar>(name: &str, v: &'a [T]) -> (String, Vec<usize>, &'a [T]) {
    (name.to_string(), vec![v.len()], v)
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar, P: ParamSet<T>>(grads: &mut P, max_norm: T) -> T {
    let n = grads.l2_norm();
    if max_norm > T::zero() && n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { base_lr: lr, min_lr: lr, warmup_steps: 0, total_steps: 1 }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar, P: ParamSet<T>> {
    pub cfg: AdamWConfig,
    pub schedule: LrSchedule,
    m: P,
    v: P,
    t: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar, P: ParamSet<T>> AdamW<T, P> {
    pub fn new(params: &P, cfg: AdamWConfig, schedule: LrSchedule) -> Self {
        Self { cfg, schedule, m: params.zeros_like(), v: params.zeros_like(), t: 0, _marker: Default::default() }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Clips, then applies one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut P, grads: &P) -> T {
        let mut g = grads.clone();
        let norm = clip_grad_norm(&mut g, T::lit(self.cfg.max_grad_norm));
        let lr = T::lit(self.schedule.at(self.t));
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let eps = T::lit(self.cfg.eps);
        let wd = T::lit(self.cfg.weight_decay);
        let gs: Vec<Vec<T>> = g.tensors().iter().map(|t| t.2.to_vec()).collect();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, gt), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * gt[i];
                v[i] = b2 * v[i] + (T::one() - b2) * gt[i] * gt[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
            }
        }
        norm
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint dtype is {found}, expected {expected}")]
    Dtype { found: String, expected: String },
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint data truncated")]
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Accumulates named tensors from several parameter groups into one archive.
#[derive(Debug, Default)]
pub struct CheckpointWriter {
    data: Vec<u8>,
    tensors: Vec<TensorRecord>,
}

impl CheckpointWriter {
    pub fn add<T: Scalar, P: ParamSet<T>>(&mut self, prefix: &str, params: &P) {
        for (name, shape, data) in params.tensors() {
            let offset = self.data.len();
            for &v in data {
                v.write_le(&mut self.data);
            }
            self.tensors.push(TensorRecord {
                name: format!("{prefix}.{name}"),
                shape,
                offset,
                bytes: self.data.len() - offset,
            });
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn write<T: Scalar>(self, stem: &Path, meta: serde_json::Value) -> Result<(), CheckpointError> {
        let manifest = Manifest { dtype: T::DTYPE.to_string(), tensors: self.tensors, meta };
        fs::write(with_ext(stem, "bin"), &self.data)?;
        fs::write(with_ext(stem, "json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

pub fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Reads an archive and fills parameter groups by name.
pub struct CheckpointReader {
    pub manifest: Manifest,
    data: Vec<u8>,
}

impl CheckpointReader {
    pub fn open(stem: &Path) -> Result<Self, CheckpointError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(with_ext(stem, "json"))?)?;
        let data = fs::read(with_ext(stem, "bin"))?;
        Ok(Self { manifest, data })
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.manifest.tensors.iter().any(|t| t.name.starts_with(&p))
    }

    /// Overwrites `params` with the tensors stored under `prefix`.
    pub fn fill<T: Scalar, P: ParamSet<T>>(&self, prefix: &str, params: &mut P) -> Result<(), CheckpointError> {
        if self.manifest.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype { found: self.manifest.dtype.clone(), expected: T::DTYPE.into() });
        }
        let specs: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, s, _)| (format!("{prefix}.{n}"), s)).collect();
        for ((name, shape), dst) in specs.into_iter().zip(params.tensors_mut()) {
            let rec = self
                .manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if rec.shape != shape {
                return Err(CheckpointError::Shape { name, found: rec.shape.clone(), expected: shape });
            }
            let end = rec.offset + rec.bytes;
            if end > self.data.len() || rec.bytes != dst.len() * T::BYTES {
                return Err(CheckpointError::Truncated);
            }
            for (i, v) in dst.iter_mut().enumerate() {
                let at = rec.offset + i * T::BYTES;
                *v = T::read_le(&self.data[at..at + T::BYTES]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Two {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl ParamSet<f64> for Two {
        fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
            vec![("a".into(), vec![2], &self.a), ("b".into(), vec![1, 3], &self.b)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.a, &mut self.b]
        }
    }

    #[test]
    fn schedule_warmup_then_cosine() {
        let s = LrSchedule { base_lr: 1.0, min_lr: 0.1, warmup_steps: 2, total_steps: 12 };
        assert!((s.at(0) - 0.5).abs() < 1e-12);
        assert!((s.at(2) - 1.0).abs() < 1e-12);
        assert!((s.at(7) - 0.55).abs() < 1e-12);
        assert!((s.at(12) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut p = Two { a: vec![1.0, -1.0], b: vec![0.0; 3] };
        let g = Two { a: vec![0.5, -2.0], b: vec![0.0; 3] };
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-12, weight_decay: 0.0, max_grad_norm: 0.0 };
        let mut opt = AdamW::new(&p, cfg, LrSchedule::constant(0.1));
        opt.step(&mut p, &g);
        assert!((p.a[0] - 0.9).abs() < 1e-9);
        assert!((p.a[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Two { a: vec![3.0, 4.0], b: vec![0.0; 3] };
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let p = Two { a: vec![1.5, -2.0], b: vec![3.0, 4.0, 5.0] };
        let mut w = CheckpointWriter::default();
        w.add("m", &p);
        w.write::<f64>(&stem, serde_json::json!({"k": 1})).unwrap();
        let r = CheckpointReader::open(&stem).unwrap();
        let mut q = p.zeros_like();
        r.fill("m", &mut q).unwrap();
        assert_eq!(p, q);
        assert_eq!(r.manifest.tensors[1].offset, 16);
        let mut bad = Two { a: vec![0.0; 2], b: vec![0.0; 3] };
        assert!(matches!(r.fill::<f64, _>("x", &mut bad), Err(CheckpointError::Missing(_))));
    }
}
