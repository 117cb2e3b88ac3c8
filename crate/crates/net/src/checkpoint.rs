//! Named-array checkpoints and the name-remapping loader.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::Fusion;
use crate::params::ParamStore;
use crate::NetError;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameter name → array, plus string metadata (`format_version`, `source`, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Array>,
    pub metadata: BTreeMap<String, String>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> NetError {
    NetError::Checkpoint { path: path.display().to_string(), reason: reason.into() }
}

impl Checkpoint {
    pub fn new(source: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("format_version".into(), FORMAT_VERSION.into());
        metadata.insert("source".into(), source.into());
        Self { entries: BTreeMap::new(), metadata }
    }

    /// Snapshot of every parameter, stored as f32.
    pub fn from_params(params: &ParamStore, source: &str) -> Result<Self, NetError> {
        let mut ck = Self::new(source);
        for (name, var) in params.iter() {
            ck.insert_tensor(name, var.as_tensor())?;
        }
        Ok(ck)
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<(), NetError> {
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        self.entries.insert(name.to_string(), Array { shape: t.dims().to_vec(), data });
        Ok(())
    }

    pub fn tensor(&self, name: &str, dtype: DType) -> Result<Option<Tensor>, NetError> {
        self.entries
            .get(name)
            .map(|a| Ok(Tensor::from_vec(a.data.clone(), a.shape.as_slice(), &candle_core::Device::Cpu)?.to_dtype(dtype)?))
            .transpose()
    }

    pub fn source(&self) -> Option<&str> {
        self.metadata.get("source").map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NetError> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .entries
            .iter()
            .map(|(k, a)| (k.clone(), a.data.iter().flat_map(|x| x.to_le_bytes()).collect(), a.shape.clone()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| Ok((k.as_str(), TensorView::new(Dtype::F32, s.clone(), b)?)))
            .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| NetError::Checkpoint { path: "<memory>".into(), reason: e.to_string() })?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta))
            .map_err(|e| NetError::Checkpoint { path: "<memory>".into(), reason: e.to_string() })
    }

    /// Writes next to `path` and renames into place, so readers never see a
    /// partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, NetError> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
        let metadata: BTreeMap<String, String> = meta.metadata().clone().unwrap_or_default().into_iter().collect();
        let mut entries = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data: Vec<f32> = match view.dtype() {
                Dtype::F32 => view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F64 => {
                    view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect()
                }
                other => return Err(ckpt_err(path, format!("entry {name}: unsupported dtype {other:?}"))),
            };
            if data.iter().any(|x| !x.is_finite()) {
                return Err(ckpt_err(path, format!("entry {name} holds non-finite values")));
            }
            entries.insert(name, Array { shape: view.shape().to_vec(), data });
        }
        Ok(Self { entries, metadata })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies every entry into same-named parameters; all must be present and match.
    pub fn restore_exact(&self, params: &ParamStore) -> Result<(), NetError> {
        for name in params.names() {
            let t = self
                .tensor(name, params.dtype())?
                .ok_or_else(|| NetError::Checkpoint { path: "<memory>".into(), reason: format!("missing {name}") })?;
            params.assign(name, &t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchKind {
    Exact,
    /// Renamed by the listed rules.
    Rule(Vec<&'static str>),
    UniqueShape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loaded {
    pub param: String,
    pub entry: String,
    pub kind: MatchKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub entry: String,
    pub reason: String,
}

/// Entries and parameters sharing a shape that no name rule could pair up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ambiguous {
    pub shape: Vec<usize>,
    pub entries: Vec<String>,
    pub params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RemapAudit {
    pub loaded: Vec<Loaded>,
    /// Checkpoint entries that were not loaded.
    pub skipped: Vec<Skipped>,
    /// Model parameters that kept their fresh initialization.
    pub missing: Vec<String>,
    pub ambiguous: Vec<Ambiguous>,
    /// Fusion mode the checkpoint's EE block was built with, when recognizable.
    pub fusion: Option<Fusion>,
}

impl RemapAudit {
    pub fn loaded_count(&self) -> usize {
        self.loaded.len()
    }

    /// Checkpoint names that were loaded through a rename rule.
    pub fn rule_matched(&self) -> Vec<&str> {
        self.loaded.iter().filter(|l| matches!(l.kind, MatchKind::Rule(_))).map(|l| l.entry.as_str()).collect()
    }

    pub fn shape_matched(&self) -> Vec<&str> {
        self.loaded.iter().filter(|l| l.kind == MatchKind::UniqueShape).map(|l| l.entry.as_str()).collect()
    }
}

impl fmt::Display for RemapAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "loaded {} (rule {}, shape {}), skipped {}, missing {}, ambiguous {}",
            self.loaded.len(),
            self.rule_matched().len(),
            self.shape_matched().len(),
            self.skipped.len(),
            self.missing.len(),
            self.ambiguous.len()
        )?;
        for l in &self.loaded {
            match &l.kind {
                MatchKind::Exact => {}
                MatchKind::Rule(r) => writeln!(f, "  rule   {} -> {} [{}]", l.entry, l.param, r.join(", "))?,
                MatchKind::UniqueShape => writeln!(f, "  shape  {} -> {}", l.entry, l.param)?,
            }
        }
        for s in &self.skipped {
            writeln!(f, "  skip   {}: {}", s.entry, s.reason)?;
        }
        for m in &self.missing {
            writeln!(f, "  miss   {m}")?;
        }
        for a in &self.ambiguous {
            writeln!(f, "  ambig  {:?}: entries {:?} params {:?}", a.shape, a.entries, a.params)?;
        }
        if let Some(fu) = self.fusion {
            writeln!(f, "  fusion {fu:?}")?;
        }
        Ok(())
    }
}

/// Rewrites tried, in order, on checkpoint names that match no parameter.
const RULES: &[(&str, fn(&str) -> Option<String>)] = &[
    ("strip module. prefix", |n| n.strip_prefix("module.").map(str::to_string)),
    ("strip model. prefix", |n| n.strip_prefix("model.").map(str::to_string)),
    ("drop first-block index", |n| {
        for enc in ["fnet", "cnet"] {
            for layer in ["layer1", "layer2", "layer3"] {
                let from = format!("{enc}.{layer}.0.");
                if let Some(rest) = n.strip_prefix(&from) {
                    return Some(format!("{enc}.{layer}.{rest}"));
                }
            }
        }
        None
    }),
    ("downsample.0 -> downsample", |n| n.contains(".downsample.0.").then(|| n.replace(".downsample.0.", ".downsample."))),
    ("gru conv{z,r,q}1 -> conv{z,r,q}", |n| {
        ["convz1", "convr1", "convq1"]
            .iter()
            .find(|k| n.contains(&format!("gru.{k}.")))
            .map(|k| n.replace(&format!("gru.{k}."), &format!("gru.{}.", &k[..5])))
    }),
];

/// Applies every rule that fires, in order; `None` when nothing changed.
fn rewrite(name: &str) -> Option<(String, Vec<&'static str>)> {
    let mut cur = name.to_string();
    let mut used = Vec::new();
    for (desc, rule) in RULES {
        if let Some(next) = rule(&cur) {
            cur = next;
            used.push(*desc);
        }
    }
    (!used.is_empty()).then_some((cur, used))
}

/// EE fusion mode implied by the fuse-conv and time-projection shapes.
pub fn detect_fusion(ckpt: &Checkpoint) -> Option<Fusion> {
    let find = |suffix: &str| {
        ckpt.entries.iter().find(|(k, _)| {
            let k = rewrite(k).map(|(n, _)| n).unwrap_or_else(|| k.to_string());
            k.ends_with(suffix)
        })
    };
    let (_, fuse) = find("ee.fuse.weight")?;
    let (_, time) = find("ee.time_mlp.2.weight")?;
    let (fuse_out, fuse_in) = (*fuse.shape.first()?, *fuse.shape.get(1)?);
    let time_out = *time.shape.first()?;
    if fuse_in == fuse_out && time_out == fuse_out {
        Some(Fusion::Add)
    } else if fuse_in == fuse_out + time_out {
        Some(Fusion::Concat)
    } else {
        None
    }
}

/// Loads checkpoint entries into `params` by exact name, then documented
/// rename rules, then unique shape. Shapes are never adapted; unmatched
/// parameters keep their initialization and are reported.
pub fn remap_checkpoint(ckpt: &Checkpoint, params: &ParamStore) -> Result<RemapAudit, NetError> {
    let mut audit = RemapAudit { fusion: detect_fusion(ckpt), ..RemapAudit::default() };
    let mut done: BTreeMap<&str, ()> = BTreeMap::new();
    let mut used: BTreeMap<&str, ()> = BTreeMap::new();
    let shape_of = |p: &str| params.get(p).map(|v| v.dims().to_vec());
    let load = |param: &str, arr: &Array| -> Result<(), NetError> {
        let t = Tensor::from_vec(arr.data.clone(), arr.shape.as_slice(), params.device())?;
        params.assign(param, &t)
    };

    for (name, arr) in &ckpt.entries {
        if let Some(shape) = shape_of(name) {
            used.insert(name, ());
            if shape == arr.shape {
                load(name, arr)?;
                done.insert(name, ());
                audit.loaded.push(Loaded { param: name.clone(), entry: name.clone(), kind: MatchKind::Exact });
            } else {
                audit.skipped.push(Skipped {
                    entry: name.clone(),
                    reason: format!("shape {:?} differs from parameter {:?}", arr.shape, shape),
                });
            }
        }
    }

    for (name, arr) in &ckpt.entries {
        if used.contains_key(name.as_str()) {
            continue;
        }
        let Some((target, rules)) = rewrite(name) else { continue };
        let Some((pname, _)) = params.iter().find(|(p, _)| **p == target) else { continue };
        if done.contains_key(pname.as_str()) {
            continue;
        }
        used.insert(name, ());
        let shape = shape_of(pname).expect("parameter exists");
        if shape == arr.shape {
            load(pname, arr)?;
            done.insert(pname, ());
            audit.loaded.push(Loaded { param: pname.clone(), entry: name.clone(), kind: MatchKind::Rule(rules) });
        } else {
            audit.skipped.push(Skipped {
                entry: name.clone(),
                reason: format!("renamed to {target} but shape {:?} differs from {:?}", arr.shape, shape),
            });
        }
    }

    let mut by_shape: BTreeMap<Vec<usize>, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for (name, arr) in &ckpt.entries {
        if !used.contains_key(name.as_str()) {
            by_shape.entry(arr.shape.clone()).or_default().0.push(name);
        }
    }
    for (pname, var) in params.iter() {
        if !done.contains_key(pname.as_str()) {
            if let Some(slot) = by_shape.get_mut(var.dims()) {
                slot.1.push(pname);
            }
        }
    }
    for (shape, (entries, ps)) in by_shape {
        match (entries.as_slice(), ps.as_slice()) {
            (_, []) => {}
            ([e], [p]) => {
                load(p, &ckpt.entries[*e])?;
                used.insert(e, ());
                done.insert(p, ());
                audit.loaded.push(Loaded { param: p.to_string(), entry: e.to_string(), kind: MatchKind::UniqueShape });
            }
            _ => {
                for e in &entries {
                    used.insert(e, ());
                    audit.skipped.push(Skipped { entry: e.to_string(), reason: "ambiguous shape match".into() });
                }
                audit.ambiguous.push(Ambiguous {
                    shape,
                    entries: entries.iter().map(|s| s.to_string()).collect(),
                    params: ps.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
    }

    for name in ckpt.entries.keys() {
        if !used.contains_key(name.as_str()) {
            audit.skipped.push(Skipped { entry: name.clone(), reason: "no matching parameter".into() });
        }
    }
    audit.missing = params.names().filter(|p| !done.contains_key(p.as_str())).cloned().collect();
    Ok(audit)
}
