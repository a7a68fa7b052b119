use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent and averaged into the teacher.
    Trainable,
    /// Running statistics; copied, never averaged.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Ordered, named collection of the variables of one network. Layers hold
/// clones of the same `Var`s, so writes through the store are visible to
/// them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn register(&mut self, name: String, tensor: Tensor, kind: ParamKind) -> Result<Var> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Lookup(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.entries.push(ParamEntry {
            name,
            var: var.clone(),
            kind,
        });
        Ok(var)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.var)
    }

    pub fn num_scalars(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.var.elem_count())
            .sum()
    }

    fn check_same_structure(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter sets differ in size: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.kind != b.kind || a.var.dims() != b.var.dims() {
                return Err(Error::Shape(format!(
                    "parameter mismatch: `{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.var.dims(),
                    b.name,
                    b.var.dims()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites every value with the corresponding one from `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.check_same_structure(other)?;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            a.var.set(&b.var.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Loads values by name from `(name, tensor)` pairs; every entry must be
    /// supplied exactly.
    pub fn load_named(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (entry, (name, t)) in self.entries.iter().zip(tensors) {
            if &entry.name != name || entry.var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    t.dims(),
                    entry.name,
                    entry.var.dims()
                )));
            }
            entry.var.set(&t.to_dtype(entry.var.dtype())?)?;
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    pub fn dtype(&self) -> DType {
        self.entries.first().map(|e| e.var.dtype()).unwrap_or(DType::F32)
    }

    pub fn device(&self) -> Device {
        self.entries
            .first()
            .map(|e| e.var.device().clone())
            .unwrap_or(Device::Cpu)
    }

    /// Flattened values of every trainable parameter, in store order.
    pub fn trainable_values<T: candle_core::WithDType>(&self) -> Result<Vec<Vec<T>>> {
        self.trainable()
            .map(|e| Ok(e.var.as_tensor().flatten_all()?.to_vec1::<T>()?))
            .collect()
    }
}

/// Elementwise `tau * teacher + (1 - tau) * student` on one slice pair,
/// with the same operation order for every precision.
pub fn ema_blend_f32(teacher: &mut [f32], student: &[f32], tau: f64) {
    let keep = tau as f32;
    let take = (1.0 - tau) as f32;
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = keep * *t + take * *s;
    }
}

pub fn ema_blend_f64(teacher: &mut [f64], student: &[f64], tau: f64) {
    let take = 1.0 - tau;
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = tau * *t + take * *s;
    }
}

/// Teacher update `ξ ← τ·ξ + (1−τ)·θ` over all trainable parameters;
/// buffers (batch-norm statistics) are copied from the student.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("EMA decay {tau} outside [0, 1]")));
    }
    teacher.check_same_structure(student)?;
    for (t, s) in teacher.entries.iter().zip(&student.entries) {
        let shape = t.var.shape().clone();
        let st = s.var.as_tensor();
        let updated = match t.kind {
            ParamKind::Buffer => st.copy()?,
            ParamKind::Trainable => match t.var.dtype() {
                DType::F32 => {
                    let mut tv = t.var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
                    let sv = st.flatten_all()?.to_vec1::<f32>()?;
                    ema_blend_f32(&mut tv, &sv, tau);
                    Tensor::from_vec(tv, shape, t.var.device())?
                }
                DType::F64 => {
                    let mut tv = t.var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
                    let sv = st.flatten_all()?.to_vec1::<f64>()?;
                    ema_blend_f64(&mut tv, &sv, tau);
                    Tensor::from_vec(tv, shape, t.var.device())?
                }
                other => return Err(Error::Config(format!("unsupported dtype {other:?}"))),
            },
        };
        t.var.set(&updated)?;
    }
    Ok(())
}
