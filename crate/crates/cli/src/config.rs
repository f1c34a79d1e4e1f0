//! INI run configuration: parsing with unknown-key rejection and a fully
//! resolved echo that parses back to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use magic_core::cmb::{CmbConfig, QMode};
use magic_core::nn::AdamConfig;
use magic_core::toyworld::{MaskMode, Split};
use magic_core::train::TrainConfig;
use magic_core::{Modality, SceneConfig, ScheduleConfig, ScheduleKind, UNetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub size: usize,
    pub seeds: Range<u64>,
    pub splits: Vec<Split>,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

/// Optimizer and schedule of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSection {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_scale: usize,
    pub time_embed_dim: usize,
    pub classes: usize,
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McuSection {
    pub train: TrainSection,
    /// Trained encoder used by `complete` and `sweep`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Unguided,
    Single,
    Cmb,
    Fla,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unguided => "unguided",
            Mode::Single => "single",
            Mode::Cmb => "cmb",
            Mode::Fla => "fla",
        }
    }
}

impl FromStr for Mode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unguided" => Mode::Unguided,
            "single" => Mode::Single,
            "cmb" => Mode::Cmb,
            "fla" => Mode::Fla,
            other => bail!("unknown mode `{other}` (expected unguided, single, cmb or fla)"),
        })
    }
}

/// How masks are drawn for scene-seed inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskChoice {
    /// Mode and ratio drawn per input.
    Random,
    Fixed(MaskMode, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompleteSection {
    pub mode: Mode,
    pub modalities: Vec<Modality>,
    pub seeds: Range<u64>,
    pub samples: usize,
    pub fla_steps: Option<usize>,
    pub mask: MaskChoice,
    /// File inputs; used instead of scene seeds when `image` is set.
    pub image: Option<PathBuf>,
    pub mask_file: Option<PathBuf>,
    pub conds: BTreeMap<Modality, PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    P,
    Q,
    Gamma,
    ModalitySubsets,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::P => "p",
            Axis::Q => "q",
            Axis::Gamma => "gamma",
            Axis::ModalitySubsets => "modality_subsets",
        }
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "p" | "P" => Axis::P,
            "q" | "Q" => Axis::Q,
            "gamma" => Axis::Gamma,
            "modality_subsets" | "modalities" => Axis::ModalitySubsets,
            other => bail!("unknown sweep axis `{other}`"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub axis: Axis,
    /// Comma-separated numbers, or `;`-separated `a+b` subsets; empty means
    /// every non-empty subset of `[complete] modalities`.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub runs: Vec<PathBuf>,
    pub extractor: Option<PathBuf>,
    pub extractor_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub schedule: ScheduleConfig,
    /// DDIM eta of unguided steps.
    pub eta: f64,
    pub backbone: BackboneSection,
    pub mcu: BTreeMap<Modality, McuSection>,
    pub cmb: CmbConfig,
    pub complete: CompleteSection,
    pub sweep: SweepSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = UNetConfig::default();
        let schedule = ScheduleConfig::default();
        RunConfig {
            data: DataSection { size: 32, seeds: 0..12_000, splits: Split::ALL.to_vec(), min_shapes: 1, max_shapes: 3 },
            eta: 0.0,
            backbone: BackboneSection {
                base_channels: net.base_channels,
                channel_mults: net.channel_mults,
                blocks_per_scale: net.blocks_per_scale,
                time_embed_dim: net.time_embed_dim,
                classes: net.cond_embed_classes,
                train: TrainSection { steps: 20_000, batch_size: 32, lr: 2e-4, resume: None },
            },
            mcu: BTreeMap::new(),
            cmb: CmbConfig::default(),
            complete: CompleteSection {
                mode: Mode::Unguided,
                modalities: Vec::new(),
                seeds: 11_000..11_001,
                samples: 5,
                fla_steps: None,
                mask: MaskChoice::Random,
                image: None,
                mask_file: None,
                conds: BTreeMap::new(),
            },
            sweep: SweepSection { axis: Axis::P, values: Vec::new() },
            eval: EvalSection { runs: Vec::new(), extractor: None, extractor_steps: 1500 },
            run: RunSection { seed: 0, out: None, backbone: None },
            schedule,
        }
    }
}

fn mcu_defaults() -> McuSection {
    McuSection { train: TrainSection { steps: 10_000, batch_size: 32, lr: 2e-4, resume: None }, checkpoint: None }
}

type Raw = BTreeMap<String, BTreeMap<String, String>>;

/// Key-value pairs of one section, consumed as they are read.
struct Section<'a> {
    name: String,
    keys: Option<&'a mut BTreeMap<String, String>>,
}

impl Section<'_> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.keys.as_mut().and_then(|k| k.remove(key))
    }

    fn parse<V: FromStr>(&mut self, key: &str, into: &mut V) -> Result<()>
    where
        V::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key) {
            *into = v.parse().map_err(|e| anyhow!("[{}] {key} = {v}: {e}", self.name))?;
        }
        Ok(())
    }

    fn with<V>(&mut self, key: &str, into: &mut V, f: impl FnOnce(&str) -> Result<V>) -> Result<()> {
        if let Some(v) = self.take(key) {
            *into = f(&v).with_context(|| format!("[{}] {key} = {v}", self.name))?;
        }
        Ok(())
    }

    fn path(&mut self, key: &str, into: &mut Option<PathBuf>) -> Result<()> {
        self.with(key, into, |v| Ok((!v.is_empty()).then(|| PathBuf::from(v))))
    }

    /// Remove and return every `prefix.<suffix>` key.
    fn prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let Some(keys) = self.keys.as_mut() else { return Vec::new() };
        let names: Vec<String> = keys.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        names.into_iter().map(|k| (k[prefix.len()..].to_string(), keys.remove(&k).unwrap())).collect()
    }
}

fn section<'a>(raw: &'a mut Raw, name: &str) -> Section<'a> {
    Section { name: name.to_string(), keys: raw.get_mut(name) }
}

pub fn parse_range(s: &str) -> Result<Range<u64>> {
    let (a, b) = s.split_once("..").ok_or_else(|| anyhow!("expected a half-open range `start..end`"))?;
    let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
    if b < a {
        bail!("range end {b} precedes start {a}");
    }
    Ok(a..b)
}

fn parse_list<V: FromStr>(s: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<V>().map_err(|e| anyhow!("`{v}`: {e}")))
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bail!("expected true or false, got `{other}`"),
    }
}

pub(crate) fn parse_modality(s: &str) -> Result<Modality> {
    let m = Modality::parse(s)?;
    if !m.is_spatial() {
        bail!("`{s}` has no guidance encoder");
    }
    Ok(m)
}

fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    let mut out: Vec<Modality> = Vec::new();
    for m in s.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let m = parse_modality(m)?;
        if out.contains(&m) {
            bail!("modality {m} listed twice");
        }
        out.push(m);
    }
    Ok(out)
}

fn parse_mask(s: &str) -> Result<MaskChoice> {
    if s == "random" {
        return Ok(MaskChoice::Random);
    }
    let (mode, ratio) = s.split_once(':').ok_or_else(|| anyhow!("expected `random` or `<mode>:<ratio>`"))?;
    Ok(MaskChoice::Fixed(MaskMode::parse(mode.trim())?, ratio.trim().parse()?))
}

fn train_section(s: &mut Section<'_>, t: &mut TrainSection) -> Result<()> {
    s.parse("steps", &mut t.steps)?;
    s.parse("batch_size", &mut t.batch_size)?;
    s.parse("lr", &mut t.lr)?;
    s.path("resume", &mut t.resume)?;
    if t.batch_size == 0 {
        bail!("[{}] batch_size must be positive", s.name);
    }
    if !(t.lr > 0.0 && t.lr.is_finite()) {
        bail!("[{}] lr must be positive", s.name);
    }
    Ok(())
}

/// Drop `#` comments, including ones after a value.
fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| match l.find('#') {
            Some(i) if i == 0 || l[..i].ends_with(char::is_whitespace) => l[..i].trim_end(),
            _ => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn read_raw(text: &str) -> Result<Raw> {
    let ini = ini::Ini::load_from_str(&strip_comments(text)).map_err(|e| anyhow!("config syntax: {e}"))?;
    let mut raw = Raw::new();
    for (sec, props) in ini.iter() {
        let Some(sec) = sec else {
            if let Some((k, _)) = props.iter().next() {
                bail!("key `{k}` appears before any [section]");
            }
            continue;
        };
        let entry = raw.entry(sec.to_string()).or_default();
        for (k, v) in props.iter() {
            if entry.insert(k.to_string(), v.to_string()).is_some() {
                bail!("[{sec}] {k} is set twice");
            }
        }
    }
    Ok(raw)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = read_raw(text)?;
        let mut c = RunConfig::default();

        let mut s = section(&mut raw, "data");
        s.parse("size", &mut c.data.size)?;
        s.with("seeds", &mut c.data.seeds, parse_range)?;
        s.with("splits", &mut c.data.splits, |v| v.split(',').map(|p| Ok(Split::parse(p.trim())?)).collect())?;
        s.parse("min_shapes", &mut c.data.min_shapes)?;
        s.parse("max_shapes", &mut c.data.max_shapes)?;

        let mut s = section(&mut raw, "schedule");
        s.with("kind", &mut c.schedule.kind, |v| Ok(ScheduleKind::parse(v)?))?;
        s.parse("t_train", &mut c.schedule.t_train)?;
        s.parse("beta_start", &mut c.schedule.beta_start)?;
        s.parse("beta_end", &mut c.schedule.beta_end)?;
        s.parse("t_sample", &mut c.schedule.t_sample)?;
        s.parse("eta", &mut c.eta)?;

        let mut s = section(&mut raw, "backbone");
        let b = &mut c.backbone;
        s.parse("base_channels", &mut b.base_channels)?;
        s.with("channel_mults", &mut b.channel_mults, parse_list)?;
        s.parse("blocks_per_scale", &mut b.blocks_per_scale)?;
        s.parse("time_embed_dim", &mut b.time_embed_dim)?;
        s.parse("classes", &mut b.classes)?;
        train_section(&mut s, &mut b.train)?;

        let mcu_names: Vec<String> = raw.keys().filter(|k| k.starts_with("mcu.")).cloned().collect();
        for name in mcu_names {
            let m = parse_modality(&name["mcu.".len()..]).with_context(|| format!("section [{name}]"))?;
            let mut sec = mcu_defaults();
            let mut s = section(&mut raw, &name);
            train_section(&mut s, &mut sec.train)?;
            s.path("checkpoint", &mut sec.checkpoint)?;
            c.mcu.insert(m, sec);
        }

        let mut s = section(&mut raw, "cmb");
        let k = &mut c.cmb;
        s.parse("p", &mut k.p)?;
        s.parse("q", &mut k.q)?;
        s.parse("gamma", &mut k.gamma)?;
        s.parse("eta", &mut k.eta)?;
        s.with("q_mode", &mut k.q_mode, |v| Ok(QMode::parse(v)?))?;
        s.with("normalize_grad", &mut k.normalize_grad, parse_bool)?;
        for (m, v) in s.prefixed("delta.") {
            let m = parse_modality(&m)?;
            k.delta.insert(m, v.parse().with_context(|| format!("[cmb] delta.{m} = {v}"))?);
        }
        k.plain_eta = c.eta;

        let mut s = section(&mut raw, "complete");
        let p = &mut c.complete;
        s.with("mode", &mut p.mode, |v| v.parse())?;
        s.with("modalities", &mut p.modalities, parse_modalities)?;
        s.with("seeds", &mut p.seeds, parse_range)?;
        s.parse("samples", &mut p.samples)?;
        s.with("fla_steps", &mut p.fla_steps, |v| Ok(Some(v.parse()?)))?;
        s.with("mask", &mut p.mask, parse_mask)?;
        s.path("image", &mut p.image)?;
        s.path("mask_file", &mut p.mask_file)?;
        for (m, v) in s.prefixed("cond.") {
            p.conds.insert(parse_modality(&m)?, PathBuf::from(v));
        }

        let mut s = section(&mut raw, "sweep");
        s.with("axis", &mut c.sweep.axis, |v| v.parse())?;
        s.with("values", &mut c.sweep.values, |v| {
            let sep = if v.contains(';') || v.contains('+') { ';' } else { ',' };
            Ok(v.split(sep).map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
        })?;

        let mut s = section(&mut raw, "eval");
        s.with("runs", &mut c.eval.runs, |v| {
            Ok(v.split(',').map(str::trim).filter(|x| !x.is_empty()).map(PathBuf::from).collect())
        })?;
        s.path("extractor", &mut c.eval.extractor)?;
        s.parse("extractor_steps", &mut c.eval.extractor_steps)?;

        let mut s = section(&mut raw, "run");
        s.parse("seed", &mut c.run.seed)?;
        s.path("out", &mut c.run.out)?;
        s.path("backbone", &mut c.run.backbone)?;

        for (sec, keys) in &raw {
            let known = ["data", "schedule", "backbone", "cmb", "complete", "sweep", "eval", "run"];
            if !known.contains(&sec.as_str()) && !sec.starts_with("mcu.") {
                bail!("unknown section [{sec}]");
            }
            if let Some(k) = keys.keys().next() {
                bail!("unknown key `{k}` in [{sec}]");
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        let t_sample = self.schedule.build()?.t_sample();
        self.net().validate()?;
        self.cmb.validate(t_sample)?;
        if let Some(k) = self.complete.fla_steps {
            if k > t_sample {
                bail!("[complete] fla_steps {k} exceeds {t_sample} sampling steps");
            }
        }
        if self.complete.samples == 0 {
            bail!("[complete] samples must be positive");
        }
        if self.eta.is_nan() || self.eta < 0.0 {
            bail!("[schedule] eta must be >= 0");
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            min_shapes: self.data.min_shapes,
            max_shapes: self.data.max_shapes,
            ..SceneConfig::with_size(self.data.size)
        }
    }

    pub fn net(&self) -> UNetConfig {
        let b = &self.backbone;
        UNetConfig {
            image_size: self.data.size,
            base_channels: b.base_channels,
            channel_mults: b.channel_mults.clone(),
            blocks_per_scale: b.blocks_per_scale,
            time_embed_dim: b.time_embed_dim,
            cond_embed_classes: b.classes,
            ..UNetConfig::default()
        }
    }

    pub fn train_config(&self, t: &TrainSection, salt: u64) -> TrainConfig {
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            adam: AdamConfig { lr: t.lr, ..AdamConfig::default() },
            seed: magic_core::train::mix_seed(self.run.seed, salt),
            fixed_batch: false,
        }
    }

    /// Every key with its resolved value, in a stable order.
    pub fn echo(&self) -> String {
        let mut o = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |v: &[String], sep: &str| v.join(sep);
        let train = |o: &mut String, t: &TrainSection| {
            let _ = writeln!(
                o,
                "steps = {}\nbatch_size = {}\nlr = {}\nresume = {}",
                t.steps,
                t.batch_size,
                t.lr,
                path(&t.resume)
            );
        };
        let d = &self.data;
        let splits: Vec<String> = d.splits.iter().map(|s| s.as_str().to_string()).collect();
        let _ = writeln!(
            o,
            "[data]\nsize = {}\nseeds = {}..{}\nsplits = {}\nmin_shapes = {}\nmax_shapes = {}\n",
            d.size,
            d.seeds.start,
            d.seeds.end,
            join(&splits, ","),
            d.min_shapes,
            d.max_shapes
        );
        let s = &self.schedule;
        let _ = writeln!(
            o,
            "[schedule]\nkind = {}\nt_train = {}\nbeta_start = {}\nbeta_end = {}\nt_sample = {}\neta = {}\n",
            s.kind.as_str(),
            s.t_train,
            s.beta_start,
            s.beta_end,
            s.t_sample,
            self.eta
        );
        let b = &self.backbone;
        let mults: Vec<String> = b.channel_mults.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(
            o,
            "[backbone]\nbase_channels = {}\nchannel_mults = {}\nblocks_per_scale = {}\ntime_embed_dim = {}\nclasses = {}",
            b.base_channels,
            join(&mults, ","),
            b.blocks_per_scale,
            b.time_embed_dim,
            b.classes
        );
        train(&mut o, &b.train);
        o.push('\n');
        for (m, sec) in &self.mcu {
            let _ = writeln!(o, "[mcu.{m}]");
            train(&mut o, &sec.train);
            let _ = writeln!(o, "checkpoint = {}\n", path(&sec.checkpoint));
        }
        let k = &self.cmb;
        let _ = writeln!(
            o,
            "[cmb]\np = {}\nq = {}\ngamma = {}\neta = {}\nq_mode = {}\nnormalize_grad = {}",
            k.p,
            k.q,
            k.gamma,
            k.eta,
            k.q_mode.as_str(),
            k.normalize_grad
        );
        for (m, v) in &k.delta {
            let _ = writeln!(o, "delta.{m} = {v}");
        }
        o.push('\n');
        let p = &self.complete;
        let mods: Vec<String> = p.modalities.iter().map(|m| m.to_string()).collect();
        let mask = match p.mask {
            MaskChoice::Random => "random".to_string(),
            MaskChoice::Fixed(mode, r) => format!("{}:{r}", mode.as_str()),
        };
        let _ = writeln!(
            o,
            "[complete]\nmode = {}\nmodalities = {}\nseeds = {}..{}\nsamples = {}\nfla_steps = {}\nmask = {mask}\nimage = {}\nmask_file = {}",
            p.mode.as_str(),
            join(&mods, ","),
            p.seeds.start,
            p.seeds.end,
            p.samples,
            p.fla_steps.unwrap_or(self.schedule.t_sample),
            path(&p.image),
            path(&p.mask_file)
        );
        for (m, f) in &p.conds {
            let _ = writeln!(o, "cond.{m} = {}", f.display());
        }
        o.push('\n');
        let sep = if self.sweep.axis == Axis::ModalitySubsets { ";" } else { "," };
        let _ =
            writeln!(o, "[sweep]\naxis = {}\nvalues = {}\n", self.sweep.axis.as_str(), join(&self.sweep.values, sep));
        let runs: Vec<String> = self.eval.runs.iter().map(|r| r.display().to_string()).collect();
        let _ = writeln!(
            o,
            "[eval]\nruns = {}\nextractor = {}\nextractor_steps = {}\n",
            join(&runs, ","),
            path(&self.eval.extractor),
            self.eval.extractor_steps
        );
        let _ = writeln!(
            o,
            "[run]\nseed = {}\nout = {}\nbackbone = {}",
            self.run.seed,
            path(&self.run.out),
            path(&self.run.backbone)
        );
        o
    }

    /// Short content hash of the echo.
    pub fn digest(&self) -> String {
        magic_core::checkpoint::digest_bytes(self.echo().as_bytes())[..16].to_string()
    }

    pub fn fla_steps(&self) -> usize {
        self.complete.fla_steps.unwrap_or(self.schedule.t_sample)
    }
}
