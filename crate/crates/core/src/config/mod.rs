//! Run configuration: YAML-subset files, defaults, overrides and a canonical snapshot.

pub mod value;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{DatasetSpec, Transform};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, HeadSpec, ModelSpec};
use crate::registry::{Component, ComponentKind, Params, Registry};
use crate::tensor::PoolMode;
use crate::training::{LossSpec, TrainSettings};

pub use value::{apply_override, emit_yaml, parse_yaml, Map, Value};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 4e-5,
            power: 0.9,
        }
    }
}

/// Schedule values a single model may override.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelOverride {
    pub max_iter: Option<u64>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub max_iter: u64,
    pub batch_size: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub eval_interval: u64,
    pub log_interval: u64,
    pub workers: usize,
    /// Keyed by model name.
    pub per_model: BTreeMap<String, ModelOverride>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            batch_size: 8,
            crop_h: 64,
            crop_w: 64,
            eval_interval: 100,
            log_interval: 10,
            workers: 1,
            per_model: BTreeMap::new(),
        }
    }
}

/// A fully validated run description. Paths are absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: DatasetSpec,
    pub val: Option<DatasetSpec>,
    pub transforms: Vec<Transform>,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub finetune_from: Option<PathBuf>,
}

/// The part of a run needed to rebuild a model for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub model: ModelSpec,
    /// Deterministic preprocessing applied before the forward pass.
    pub preprocess: Vec<Transform>,
}

/// Read `path`, apply `key.path=value` overrides, validate against the built-in registry.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = std::path::absolute(path)
        .map_err(|e| Error::io(path, e))?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let ctx = |e: Error| e.context(path.display().to_string());
    let mut value = parse_yaml(&text).map_err(ctx)?;
    for o in overrides {
        apply_override(&mut value, o).map_err(ctx)?;
    }
    RunConfig::from_value(&value, &base, &Registry::with_builtins()).map_err(ctx)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn path_str(p: &Path) -> Value {
    Value::Str(p.to_string_lossy().into_owned())
}

fn expect<T>(c: Component, f: impl FnOnce(Component) -> Option<T>) -> T {
    f(c).expect("registry checks component kinds")
}

/// `{name: x, ...}` or the bare-string shorthand `x`.
fn named_map(v: &Value, path: &str) -> Result<Map> {
    match v {
        Value::Str(s) => Ok(Map::from([("name".to_string(), Value::Str(s.clone()))])),
        Value::Map(m) => Ok(m.clone()),
        other => Err(Error::Config(format!("{path}: expected a name or a map, got {}", other.kind()))),
    }
}

fn build_model(reg: &Registry, spec: &Value, num_classes: usize, path: &str) -> Result<ModelSpec> {
    let mut m = named_map(spec, path)?;
    if m.contains_key("num_classes") {
        return Err(Error::Config(format!("{path}.num_classes: set dataset.num_classes instead")));
    }
    m.insert("num_classes".into(), Value::Int(num_classes as i64));
    Ok(expect(reg.create_named(ComponentKind::Model, &m, path)?, |c| match c {
        Component::Model(m) => Some(m),
        _ => None,
    }))
}

fn build_transforms(reg: &Registry, v: Option<&Value>, inject: &Map, path: &str) -> Result<Vec<Transform>> {
    let items = match v {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::Seq(items)) => items,
        Some(other) => return Err(Error::Config(format!("{path}: expected a sequence, got {}", other.kind()))),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let at = format!("{path}.{i}");
            let mut m = named_map(item, &at)?;
            if m.get("name") == Some(&Value::Str("random_crop_pad".into())) {
                for (k, v) in inject {
                    m.entry(k.clone()).or_insert_with(|| v.clone());
                }
            }
            Ok(expect(reg.create_named(ComponentKind::Transform, &m, &at)?, |c| match c {
                Component::Transform(t) => Some(t),
                _ => None,
            }))
        })
        .collect()
}

fn build_dataset(reg: &Registry, v: &Value, base: &Path, path: &str) -> Result<DatasetSpec> {
    let mut m = match v {
        Value::Str(list) => Map::from([
            ("name".to_string(), Value::Str("file_list".into())),
            ("list".to_string(), Value::Str(list.clone())),
        ]),
        other => named_map(other, path)?,
    };
    for key in ["list", "dir"] {
        if let Some(Value::Str(p)) = m.get(key) {
            let abs = resolve(base, p);
            m.insert(key.into(), path_str(&abs));
        }
    }
    Ok(expect(reg.create_named(ComponentKind::Dataset, &m, path)?, |c| match c {
        Component::Dataset(d) => Some(d),
        _ => None,
    }))
}

fn section<'a>(root: &mut Params<'a>, key: &str) -> Result<Map> {
    Ok(root.opt_map(key)?.cloned().unwrap_or_default())
}

impl RunConfig {
    /// Validate an untyped tree; relative paths resolve against `base`.
    pub fn from_value(v: &Value, base: &Path, reg: &Registry) -> Result<Self> {
        let root_map = v
            .as_map()
            .ok_or_else(|| Error::Config(format!("top level must be a map, got {}", v.kind())))?;
        let mut root = Params::new("", root_map);

        let dataset = section(&mut root, "dataset")?;
        let mut ds = Params::new("dataset", &dataset);
        let num_classes = ds.required_usize("num_classes")?;

        let model_value = root
            .get("model")
            .ok_or_else(|| Error::Config("model: required field is missing".into()))?;
        let model = build_model(reg, model_value, num_classes, "model")?;

        let loss_map = section(&mut root, "loss")?;
        let loss = if loss_map.is_empty() {
            LossSpec::default()
        } else {
            let mut m = loss_map.clone();
            m.entry("name".to_string()).or_insert_with(|| Value::Str("cross_entropy".into()));
            expect(reg.create_named(ComponentKind::Loss, &m, "loss")?, |c| match c {
                Component::Loss(l) => Some(l),
                _ => None,
            })
        };

        let opt_map = section(&mut root, "optimizer")?;
        let mut op = Params::new("optimizer", &opt_map);
        let d = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            base_lr: op.f64("base_lr", d.base_lr)?,
            momentum: op.f64("momentum", d.momentum)?,
            weight_decay: op.f64("weight_decay", d.weight_decay)?,
            power: op.f64("power", d.power)?,
        };
        if !(optimizer.base_lr >= 0.0 && optimizer.base_lr.is_finite()) {
            return Err(op.range_error("base_lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&optimizer.momentum) {
            return Err(op.range_error("momentum", "must lie in [0, 1)"));
        }
        if !(optimizer.weight_decay >= 0.0 && optimizer.weight_decay.is_finite()) {
            return Err(op.range_error("weight_decay", "must be finite and non-negative"));
        }
        if !(optimizer.power > 0.0 && optimizer.power.is_finite()) {
            return Err(op.range_error("power", "must be positive"));
        }
        op.finish()?;

        let sched_map = section(&mut root, "schedule")?;
        let mut sp = Params::new("schedule", &sched_map);
        let d = ScheduleConfig::default();
        let mut schedule = ScheduleConfig {
            max_iter: sp.u64("max_iter", d.max_iter)?,
            batch_size: sp.usize_in("batch_size", d.batch_size, 1, 4096)?,
            crop_h: sp.usize_in("crop_h", d.crop_h, 1, 1 << 16)?,
            crop_w: sp.usize_in("crop_w", d.crop_w, 1, 1 << 16)?,
            eval_interval: sp.u64("eval_interval", d.eval_interval)?,
            log_interval: sp.u64("log_interval", d.log_interval)?,
            workers: sp.usize_in("workers", d.workers, 1, 256)?,
            per_model: BTreeMap::new(),
        };
        if schedule.log_interval == 0 {
            return Err(sp.range_error("log_interval", "must be >= 1"));
        }
        if let Some(per) = sp.opt_map("per_model")? {
            for (name, v) in per {
                let at = format!("schedule.per_model.{name}");
                if !reg.contains(ComponentKind::Model, name) {
                    return Err(reg.unknown(ComponentKind::Model, name).context(at));
                }
                let m = v
                    .as_map()
                    .ok_or_else(|| Error::Config(format!("{at}: expected a map, got {}", v.kind())))?;
                let mut p = Params::new(at, m);
                let o = ModelOverride {
                    max_iter: p.opt_u64("max_iter")?,
                    batch_size: p.opt_usize("batch_size")?,
                };
                if o.batch_size == Some(0) {
                    return Err(p.range_error("batch_size", "must be >= 1"));
                }
                p.finish()?;
                schedule.per_model.insert(name.clone(), o);
            }
        }
        sp.finish()?;

        let inject = Map::from([
            ("crop_h".to_string(), Value::Int(schedule.crop_h as i64)),
            ("crop_w".to_string(), Value::Int(schedule.crop_w as i64)),
            ("ignore_index".to_string(), Value::Int(loss.ignore_index as i64)),
        ]);
        let transforms = build_transforms(reg, ds.get("transforms"), &inject, "dataset.transforms")?;
        let train_v = ds
            .get("train")
            .ok_or_else(|| Error::Config("dataset.train: required field is missing".into()))?;
        let train = build_dataset(reg, train_v, base, "dataset.train")?;
        let val = ds.get("val").map(|v| build_dataset(reg, v, base, "dataset.val")).transpose()?;
        ds.finish()?;

        let seed = root.u64("seed", 0)?;
        let output_dir = match root.opt_str("output_dir")? {
            Some(p) => resolve(base, p),
            None => base.join("runs").join(&model.name),
        };
        let finetune_from = root.opt_str("finetune_from")?.map(|p| resolve(base, p));
        root.finish()?;

        Ok(Self {
            model,
            train,
            val,
            transforms,
            loss,
            optimizer,
            schedule,
            seed,
            output_dir,
            finetune_from,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes
    }

    /// `max_iter` after any per-model override.
    pub fn max_iter(&self) -> u64 {
        self.schedule
            .per_model
            .get(&self.model.name)
            .and_then(|o| o.max_iter)
            .unwrap_or(self.schedule.max_iter)
    }

    pub fn batch_size(&self) -> usize {
        self.schedule
            .per_model
            .get(&self.model.name)
            .and_then(|o| o.batch_size)
            .unwrap_or(self.schedule.batch_size)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            max_iter: self.max_iter(),
            base_lr: self.optimizer.base_lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            power: self.optimizer.power,
            aux_weight: self.loss.aux_weight,
            ignore_index: self.loss.ignore_index,
            eval_interval: self.schedule.eval_interval,
            log_interval: self.schedule.log_interval,
            seed: self.seed,
            output_dir: Some(self.output_dir.clone()),
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            model: self.model.clone(),
            preprocess: crate::eval::eval_transforms(&self.transforms),
        }
    }

    pub fn to_value(&self) -> Value {
        let mut dataset = Map::new();
        dataset.insert("num_classes".into(), Value::Int(self.num_classes() as i64));
        dataset.insert("train".into(), dataset_value(&self.train));
        if let Some(v) = &self.val {
            dataset.insert("val".into(), dataset_value(v));
        }
        dataset.insert("transforms".into(), Value::Seq(self.transforms.iter().map(transform_value).collect()));

        let o = &self.optimizer;
        let optimizer = Map::from([
            ("base_lr".to_string(), Value::Float(o.base_lr)),
            ("momentum".to_string(), Value::Float(o.momentum)),
            ("weight_decay".to_string(), Value::Float(o.weight_decay)),
            ("power".to_string(), Value::Float(o.power)),
        ]);
        let s = &self.schedule;
        let mut schedule = Map::from([
            ("max_iter".to_string(), Value::Int(s.max_iter as i64)),
            ("batch_size".to_string(), Value::Int(s.batch_size as i64)),
            ("crop_h".to_string(), Value::Int(s.crop_h as i64)),
            ("crop_w".to_string(), Value::Int(s.crop_w as i64)),
            ("eval_interval".to_string(), Value::Int(s.eval_interval as i64)),
            ("log_interval".to_string(), Value::Int(s.log_interval as i64)),
            ("workers".to_string(), Value::Int(s.workers as i64)),
        ]);
        if !s.per_model.is_empty() {
            let per = s
                .per_model
                .iter()
                .map(|(name, o)| {
                    let mut m = Map::new();
                    if let Some(v) = o.max_iter {
                        m.insert("max_iter".into(), Value::Int(v as i64));
                    }
                    if let Some(v) = o.batch_size {
                        m.insert("batch_size".into(), Value::Int(v as i64));
                    }
                    (name.clone(), Value::Map(m))
                })
                .collect();
            schedule.insert("per_model".into(), Value::Map(per));
        }

        let mut root = Map::new();
        root.insert("model".into(), model_value(&self.model));
        root.insert("dataset".into(), Value::Map(dataset));
        root.insert("loss".into(), loss_value(&self.loss));
        root.insert("optimizer".into(), Value::Map(optimizer));
        root.insert("schedule".into(), Value::Map(schedule));
        root.insert("seed".into(), Value::Int(self.seed as i64));
        root.insert("output_dir".into(), path_str(&self.output_dir));
        if let Some(p) = &self.finetune_from {
            root.insert("finetune_from".into(), path_str(p));
        }
        Value::Map(root)
    }

    /// Canonical YAML that parses back to an equal config.
    pub fn snapshot(&self) -> String {
        emit_yaml(&self.to_value())
    }
}

impl InferenceConfig {
    pub fn to_value(&self) -> Value {
        Value::Map(Map::from([
            ("model".to_string(), model_value(&self.model)),
            ("num_classes".to_string(), Value::Int(self.model.num_classes as i64)),
            (
                "preprocess".to_string(),
                Value::Seq(self.preprocess.iter().map(transform_value).collect()),
            ),
        ]))
    }

    pub fn snapshot(&self) -> String {
        emit_yaml(&self.to_value())
    }

    pub fn from_value(v: &Value, reg: &Registry) -> Result<Self> {
        let m = v
            .as_map()
            .ok_or_else(|| Error::Config(format!("top level must be a map, got {}", v.kind())))?;
        let mut p = Params::new("", m);
        let num_classes = p.required_usize("num_classes")?;
        let model_v = p
            .get("model")
            .ok_or_else(|| Error::Config("model: required field is missing".into()))?;
        let model = build_model(reg, model_v, num_classes, "model")?;
        let preprocess = build_transforms(reg, p.get("preprocess"), &Map::new(), "preprocess")?;
        p.finish()?;
        Ok(Self { model, preprocess })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_value(&parse_yaml(text)?, &Registry::with_builtins())
    }
}

fn model_value(m: &ModelSpec) -> Value {
    let mut out = Map::new();
    out.insert("name".into(), Value::Str(m.name.clone()));
    let ints = |v: &[usize]| Value::Seq(v.iter().map(|&x| Value::Int(x as i64)).collect());
    let mut bb = Map::from([("name".to_string(), Value::Str(m.backbone.name().into()))]);
    match &m.backbone {
        BackboneSpec::TinyVgg { widths, pool } => {
            bb.insert("widths".into(), ints(widths));
            let pool = match pool {
                PoolMode::Max => "max",
                PoolMode::Avg => "avg",
            };
            bb.insert("pool".into(), Value::Str(pool.into()));
        }
        BackboneSpec::TinyResNet { widths, output_stride } => {
            bb.insert("widths".into(), ints(widths));
            bb.insert("output_stride".into(), Value::Int(*output_stride as i64));
        }
    }
    out.insert("backbone".into(), Value::Map(bb));
    out.insert("head_ch".into(), Value::Int(m.head_ch as i64));
    out.insert("aux".into(), Value::Bool(m.aux));
    out.insert("align_corners".into(), Value::Bool(m.align_corners));
    match &m.head {
        HeadSpec::Fcn | HeadSpec::UNet => {}
        HeadSpec::Psp { bins, proj_ch } => {
            out.insert("bins".into(), ints(bins));
            if let Some(p) = proj_ch {
                out.insert("proj_ch".into(), Value::Int(*p as i64));
            }
        }
        HeadSpec::DeepLabV3 { rates } => {
            out.insert("rates".into(), ints(rates));
        }
        HeadSpec::DeepLabV3p {
            rates,
            low_level_stride,
            low_ch,
        } => {
            out.insert("rates".into(), ints(rates));
            out.insert("low_level_stride".into(), Value::Int(*low_level_stride as i64));
            out.insert("low_ch".into(), Value::Int(*low_ch as i64));
        }
        HeadSpec::Ocr { key_ch } => {
            out.insert("key_ch".into(), Value::Int(*key_ch as i64));
        }
    }
    Value::Map(out)
}

fn f32s(v: [f32; 3]) -> Value {
    Value::Seq(v.iter().map(|&x| Value::Float(x.to_string().parse().expect("float text"))).collect())
}

fn transform_value(t: &Transform) -> Value {
    let mut m = Map::from([("name".to_string(), Value::Str(t.name().into()))]);
    match t {
        Transform::RandomScale { lo, hi } => {
            m.insert("lo".into(), Value::Float(*lo));
            m.insert("hi".into(), Value::Float(*hi));
        }
        Transform::RandomHflip { p } => {
            m.insert("p".into(), Value::Float(*p));
        }
        Transform::RandomBrightness { delta } => {
            m.insert("delta".into(), Value::Float(*delta));
        }
        Transform::RandomCropPad {
            crop_h,
            crop_w,
            fill,
            ignore_index,
        } => {
            m.insert("crop_h".into(), Value::Int(*crop_h as i64));
            m.insert("crop_w".into(), Value::Int(*crop_w as i64));
            if let Some(f) = fill {
                m.insert("fill".into(), f32s(*f));
            }
            m.insert("ignore_index".into(), Value::Int(*ignore_index as i64));
        }
        Transform::Normalize { mean, std } => {
            m.insert("mean".into(), f32s(*mean));
            m.insert("std".into(), f32s(*std));
        }
    }
    Value::Map(m)
}

fn dataset_value(d: &DatasetSpec) -> Value {
    let mut m = Map::from([("name".to_string(), Value::Str(d.name().into()))]);
    match d {
        DatasetSpec::FileList { list } => {
            m.insert("list".into(), path_str(list));
        }
        DatasetSpec::SyntheticShapes { dir, count, size, seed } => {
            m.insert("dir".into(), path_str(dir));
            m.insert("count".into(), Value::Int(*count as i64));
            m.insert("size".into(), Value::Int(*size as i64));
            m.insert("seed".into(), Value::Int(*seed as i64));
        }
    }
    Value::Map(m)
}

fn loss_value(l: &LossSpec) -> Value {
    Value::Map(Map::from([
        ("name".to_string(), Value::Str(l.name().into())),
        ("ignore_index".to_string(), Value::Int(l.ignore_index as i64)),
        ("aux_weight".to_string(), Value::Float(l.aux_weight)),
    ]))
}
