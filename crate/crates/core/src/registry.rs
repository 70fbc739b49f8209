//! Name-to-builder maps for the five component kinds, with strict parameter checking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use crate::config::value::{Map, Value};
use crate::data::{DatasetSpec, Transform, DEFAULT_BRIGHTNESS_DELTA, DEFAULT_FLIP_P, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, HeadSpec, ModelSpec, MODEL_NAMES};
use crate::tensor::PoolMode;
use crate::training::LossSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentKind {
    Model,
    Backbone,
    Loss,
    Transform,
    Dataset,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::Model,
        ComponentKind::Backbone,
        ComponentKind::Loss,
        ComponentKind::Transform,
        ComponentKind::Dataset,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Model => "model",
            ComponentKind::Backbone => "backbone",
            ComponentKind::Loss => "loss",
            ComponentKind::Transform => "transform",
            ComponentKind::Dataset => "dataset",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A constructed component.
#[derive(Clone, Debug, PartialEq)]
pub enum Component {
    Model(ModelSpec),
    Backbone(BackboneSpec),
    Loss(LossSpec),
    Transform(Transform),
    Dataset(DatasetSpec),
}

impl Component {
    pub fn kind(&self) -> ComponentKind {
        match self {
            Component::Model(_) => ComponentKind::Model,
            Component::Backbone(_) => ComponentKind::Backbone,
            Component::Loss(_) => ComponentKind::Loss,
            Component::Transform(_) => ComponentKind::Transform,
            Component::Dataset(_) => ComponentKind::Dataset,
        }
    }

    /// The registered name the instance was built under.
    pub fn name(&self) -> &str {
        match self {
            Component::Model(m) => &m.name,
            Component::Backbone(b) => b.name(),
            Component::Loss(l) => l.name(),
            Component::Transform(t) => t.name(),
            Component::Dataset(d) => d.name(),
        }
    }
}

/// Strict reader over a component's parameter map: every key must be consumed.
pub struct Params<'a> {
    path: String,
    map: &'a Map,
    used: BTreeSet<&'a str>,
    known: BTreeSet<String>,
}

impl<'a> Params<'a> {
    pub fn new(path: impl Into<String>, map: &'a Map) -> Self {
        Self {
            path: path.into(),
            map,
            used: BTreeSet::new(),
            known: BTreeSet::new(),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    fn field(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn bad(&self, key: &str, want: &str, got: &Value) -> Error {
        Error::Config(format!("{}: expected {want}, got {}", self.field(key), got.kind()))
    }

    pub fn range_error(&self, key: &str, message: impl fmt::Display) -> Error {
        Error::Config(format!("{}: {message}", self.field(key)))
    }

    pub fn get(&mut self, key: &str) -> Option<&'a Value> {
        self.known.insert(key.to_string());
        let (k, v) = self.map.get_key_value(key)?;
        self.used.insert(k.as_str());
        (!matches!(v, Value::Null)).then_some(v)
    }

    pub fn contains(&mut self, key: &str) -> bool {
        self.known.insert(key.to_string());
        self.map.contains_key(key)
    }

    pub fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Int(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(self.bad(key, "a number", v)),
        }
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn opt_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Int(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v @ Value::Int(_)) => Err(self.bad(key, "a non-negative integer", v)),
            Some(v) => Err(self.bad(key, "an integer", v)),
        }
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        Ok(self.opt_u64(key)?.unwrap_or(default))
    }

    pub fn opt_usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.opt_u64(key)?.map(|v| v as usize))
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    /// Integer constrained to `lo..=hi`.
    pub fn usize_in(&mut self, key: &str, default: usize, lo: usize, hi: usize) -> Result<usize> {
        let v = self.usize(key, default)?;
        if !(lo..=hi).contains(&v) {
            return Err(self.range_error(key, format!("{v} is outside {lo}..={hi}")));
        }
        Ok(v)
    }

    pub fn required_usize(&mut self, key: &str) -> Result<usize> {
        self.opt_usize(key)?
            .ok_or_else(|| Error::Config(format!("{}: required field is missing", self.field(key))))
    }

    pub fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(v) => Err(self.bad(key, "true or false", v)),
        }
    }

    pub fn opt_str(&mut self, key: &str) -> Result<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s)),
            Some(v) => Err(self.bad(key, "a string", v)),
        }
    }

    pub fn required_str(&mut self, key: &str) -> Result<&'a str> {
        self.opt_str(key)?
            .ok_or_else(|| Error::Config(format!("{}: required field is missing", self.field(key))))
    }

    pub fn usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(Value::Seq(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Int(i) if *i >= 0 => Ok(*i as usize),
                    other => Err(self.bad(key, "a list of non-negative integers", other)),
                })
                .collect(),
            Some(v) => Err(self.bad(key, "a list of integers", v)),
        }
    }

    pub fn f64_triple(&mut self, key: &str) -> Result<Option<[f64; 3]>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Seq(items)) if items.len() == 3 => {
                let mut out = [0.0; 3];
                for (o, v) in out.iter_mut().zip(items) {
                    *o = match v {
                        Value::Float(f) => *f,
                        Value::Int(i) => *i as f64,
                        other => return Err(self.bad(key, "a list of 3 numbers", other)),
                    };
                }
                Ok(Some(out))
            }
            Some(v) => Err(self.bad(key, "a list of 3 numbers", v)),
        }
    }

    pub fn opt_map(&mut self, key: &str) -> Result<Option<&'a Map>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Map(m)) => Ok(Some(m)),
            Some(v) => Err(self.bad(key, "a map", v)),
        }
    }

    /// Reject keys that no accessor asked for.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self
            .map
            .keys()
            .map(String::as_str)
            .filter(|k| !self.used.contains(k))
            .collect();
        match unknown.first() {
            None => Ok(()),
            Some(k) => {
                let hint = suggest(k, self.known.iter().map(String::as_str));
                Err(Error::Config(format!("{}: unknown parameter{hint}", self.field(k))))
            }
        }
    }
}

/// `"; did you mean 'a', 'b'?"` for candidates within edit distance 2.
fn suggest<'s>(name: &str, candidates: impl IntoIterator<Item = &'s str>) -> String {
    let near = nearest_names(name, candidates);
    if near.is_empty() {
        return String::new();
    }
    let list: Vec<String> = near.iter().map(|c| format!("'{c}'")).collect();
    format!("; did you mean {}?", list.join(", "))
}

/// Names within edit distance 2 of `name`, nearest first.
pub fn nearest_names<'s>(name: &str, candidates: impl IntoIterator<Item = &'s str>) -> Vec<&'s str> {
    let mut near: Vec<(usize, &str)> = candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(name, c), c))
        .filter(|&(d, _)| d <= 2)
        .collect();
    near.sort();
    near.into_iter().map(|(_, c)| c).collect()
}

pub type Builder = Arc<dyn Fn(&Registry, &mut Params<'_>) -> Result<Component> + Send + Sync>;

#[derive(Clone)]
struct Registration {
    registrant: String,
    builder: Builder,
}

/// Per-kind name → builder maps; lookups are case-sensitive.
#[derive(Clone, Default)]
pub struct Registry {
    kinds: BTreeMap<ComponentKind, BTreeMap<String, Registration>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_map();
        for kind in ComponentKind::ALL {
            d.entry(&kind.as_str(), &self.list(kind));
        }
        d.finish()
    }
}

impl Registry {
    /// An empty registry.
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding every shipped component.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        register_builtins(&mut r).expect("built-in names are unique");
        r
    }

    /// Add `name` under `kind`; `registrant` identifies the caller in conflict errors.
    pub fn register<F>(&mut self, kind: ComponentKind, name: &str, registrant: &str, builder: F) -> Result<()>
    where
        F: Fn(&Registry, &mut Params<'_>) -> Result<Component> + Send + Sync + 'static,
    {
        if name.is_empty() {
            return Err(Error::Registry(format!("cannot register an empty {kind} name")));
        }
        let map = self.kinds.entry(kind).or_default();
        if let Some(prior) = map.get(name) {
            return Err(Error::Registry(format!(
                "{kind} '{name}' is already registered by {}",
                prior.registrant
            )));
        }
        map.insert(
            name.to_string(),
            Registration {
                registrant: registrant.to_string(),
                builder: Arc::new(builder),
            },
        );
        Ok(())
    }

    /// Registered names of `kind`, sorted.
    pub fn list(&self, kind: ComponentKind) -> Vec<&str> {
        self.kinds
            .get(&kind)
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn contains(&self, kind: ComponentKind, name: &str) -> bool {
        self.kinds.get(&kind).is_some_and(|m| m.contains_key(name))
    }

    /// Unknown-name error with nearby suggestions.
    pub fn unknown(&self, kind: ComponentKind, name: &str) -> Error {
        let hint = suggest(name, self.list(kind));
        Error::Registry(format!("unknown {kind} '{name}'{hint}"))
    }

    /// Build `name` from `params`; `path` prefixes error messages (e.g. `model.backbone`).
    pub fn create_at(&self, kind: ComponentKind, name: &str, params: &Map, path: &str) -> Result<Component> {
        let reg = self
            .kinds
            .get(&kind)
            .and_then(|m| m.get(name))
            .ok_or_else(|| self.unknown(kind, name))?;
        let mut p = Params::new(path, params);
        let built = (reg.builder)(self, &mut p)?;
        p.finish()?;
        if built.kind() != kind {
            return Err(Error::Registry(format!(
                "{kind} builder '{name}' produced a {}",
                built.kind()
            )));
        }
        Ok(built)
    }

    pub fn create(&self, kind: ComponentKind, name: &str, params: &Map) -> Result<Component> {
        self.create_at(kind, name, params, kind.as_str())
    }

    /// Build from a `{name: ..., <params>}` map.
    pub fn create_named(&self, kind: ComponentKind, spec: &Map, path: &str) -> Result<Component> {
        let name = match spec.get("name") {
            Some(Value::Str(s)) => s.as_str(),
            Some(v) => return Err(Error::Config(format!("{path}.name: expected a string, got {}", v.kind()))),
            None => return Err(Error::Config(format!("{path}.name: required field is missing"))),
        };
        let mut params = spec.clone();
        params.shift_remove("name");
        self.create_at(kind, name, &params, path)
    }

    pub fn create_model(&self, name: &str, params: &Map) -> Result<ModelSpec> {
        match self.create(ComponentKind::Model, name, params)? {
            Component::Model(m) => Ok(m),
            _ => unreachable!("kind checked in create_at"),
        }
    }
}

fn pool_mode(p: &mut Params<'_>) -> Result<PoolMode> {
    match p.opt_str("pool")? {
        None | Some("max") => Ok(PoolMode::Max),
        Some("avg") => Ok(PoolMode::Avg),
        Some(other) => Err(p.range_error("pool", format!("'{other}' is not one of max, avg"))),
    }
}

fn model_builder(name: &'static str) -> impl Fn(&Registry, &mut Params<'_>) -> Result<Component> + Send + Sync {
    move |reg, p| {
        let num_classes = p.required_usize("num_classes")?;
        if !(2..=255).contains(&num_classes) {
            return Err(p.range_error("num_classes", format!("{num_classes} is outside 2..=255")));
        }
        let mut spec = ModelSpec::preset(name, num_classes)?;
        if let Some(b) = p.opt_map("backbone")? {
            let path = format!("{}.backbone", p.path());
            match reg.create_named(ComponentKind::Backbone, b, &path)? {
                Component::Backbone(bb) => spec.backbone = bb,
                _ => unreachable!("kind checked in create_at"),
            }
        }
        spec.head_ch = p.usize_in("head_ch", spec.head_ch, 1, 4096)?;
        spec.aux = p.bool("aux", spec.aux)?;
        spec.align_corners = p.bool("align_corners", spec.align_corners)?;
        match &mut spec.head {
            HeadSpec::Fcn | HeadSpec::UNet => {}
            HeadSpec::Psp { bins, proj_ch } => {
                *bins = p.usize_list("bins", bins)?;
                *proj_ch = p.opt_usize("proj_ch")?.or(*proj_ch);
            }
            HeadSpec::DeepLabV3 { rates } => *rates = p.usize_list("rates", rates)?,
            HeadSpec::DeepLabV3p {
                rates,
                low_level_stride,
                low_ch,
            } => {
                *rates = p.usize_list("rates", rates)?;
                *low_level_stride = p.usize("low_level_stride", *low_level_stride)?;
                *low_ch = p.usize_in("low_ch", *low_ch, 1, 4096)?;
            }
            HeadSpec::Ocr { key_ch } => *key_ch = p.usize_in("key_ch", *key_ch, 1, 4096)?,
        }
        Ok(Component::Model(spec))
    }
}

fn register_builtins(r: &mut Registry) -> Result<()> {
    const BUILTIN: &str = "segkit built-ins";
    use ComponentKind as K;
    for name in MODEL_NAMES {
        r.register(K::Model, name, BUILTIN, model_builder(name))?;
    }

    r.register(K::Backbone, "tiny_vgg", BUILTIN, |_, p| {
        let BackboneSpec::TinyVgg { widths, pool } = BackboneSpec::tiny_vgg() else {
            unreachable!()
        };
        let widths = p.usize_list("widths", &widths)?;
        let pool = if p.contains("pool") { pool_mode(p)? } else { pool };
        Ok(Component::Backbone(BackboneSpec::TinyVgg { widths, pool }))
    })?;
    r.register(K::Backbone, "tiny_resnet", BUILTIN, |_, p| {
        let widths = p.usize_list("widths", &[16, 32, 64, 128])?;
        let output_stride = p.usize("output_stride", 8)?;
        if ![8, 16, 32].contains(&output_stride) {
            return Err(p.range_error("output_stride", format!("{output_stride} is not one of 8, 16, 32")));
        }
        Ok(Component::Backbone(BackboneSpec::TinyResNet { widths, output_stride }))
    })?;

    r.register(K::Loss, "cross_entropy", BUILTIN, |_, p| {
        let ignore_index = p.usize_in("ignore_index", IGNORE_INDEX as usize, 0, 255)? as u8;
        let aux_weight = p.f64("aux_weight", 0.4)?;
        if !(aux_weight >= 0.0 && aux_weight.is_finite()) {
            return Err(p.range_error("aux_weight", "must be finite and non-negative"));
        }
        Ok(Component::Loss(LossSpec {
            ignore_index,
            aux_weight,
        }))
    })?;

    let transform = |t: Transform, p: &Params<'_>| -> Result<Component> {
        t.validate().map_err(|e| e.context(p.path().to_string()))?;
        Ok(Component::Transform(t))
    };
    r.register(K::Transform, "random_scale", BUILTIN, move |_, p| {
        let t = Transform::RandomScale {
            lo: p.f64("lo", 0.5)?,
            hi: p.f64("hi", 2.0)?,
        };
        transform(t, p)
    })?;
    r.register(K::Transform, "random_hflip", BUILTIN, move |_, p| {
        let t = Transform::RandomHflip {
            p: p.f64("p", DEFAULT_FLIP_P)?,
        };
        transform(t, p)
    })?;
    r.register(K::Transform, "random_brightness", BUILTIN, move |_, p| {
        let t = Transform::RandomBrightness {
            delta: p.f64("delta", DEFAULT_BRIGHTNESS_DELTA)?,
        };
        transform(t, p)
    })?;
    r.register(K::Transform, "random_crop_pad", BUILTIN, move |_, p| {
        let crop_h = p.required_usize("crop_h")?;
        let crop_w = p.required_usize("crop_w")?;
        let fill = p.f64_triple("fill")?.map(|f| f.map(|v| v as f32));
        let ignore_index = p.usize_in("ignore_index", IGNORE_INDEX as usize, 0, 255)? as u8;
        let t = Transform::RandomCropPad {
            crop_h,
            crop_w,
            fill,
            ignore_index,
        };
        transform(t, p)
    })?;
    r.register(K::Transform, "normalize", BUILTIN, move |_, p| {
        let mean = p.f64_triple("mean")?.unwrap_or([0.5; 3]);
        let std = p.f64_triple("std")?.unwrap_or([0.5; 3]);
        let t = Transform::Normalize {
            mean: mean.map(|v| v as f32),
            std: std.map(|v| v as f32),
        };
        transform(t, p)
    })?;

    r.register(K::Dataset, "file_list", BUILTIN, |_, p| {
        let list = PathBuf::from(p.required_str("list")?);
        Ok(Component::Dataset(DatasetSpec::FileList { list }))
    })?;
    r.register(K::Dataset, "synthetic_shapes", BUILTIN, |_, p| {
        let dir = PathBuf::from(p.required_str("dir")?);
        let count = p.usize_in("count", 8, 1, 100_000)?;
        let size = p.usize_in("size", 64, 8, 4096)?;
        let seed = p.u64("seed", 0)?;
        Ok(Component::Dataset(DatasetSpec::SyntheticShapes { dir, count, size, seed }))
    })?;
    Ok(())
}
