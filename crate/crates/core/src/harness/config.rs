//! Run configuration: an INI-style file (`[section]` headers, `key = value`
//! lines, `#` comments) mapped onto typed settings with defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{AugmentationConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, NormSpec};
use crate::metrics::Aggregation;
use crate::networks::{default_bottleneck, CpnConfig, DcnConfig, BASE_CHANNELS};

/// Parsed `[section] key = value` text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                ini.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", i + 1))
            })?;
            if section.is_empty() {
                return Err(Error::invalid(format!(
                    "config line {}: key outside a section",
                    i + 1
                )));
            }
            let prev = ini
                .sections
                .entry(section.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(Error::invalid(format!(
                    "config line {}: duplicate key {}",
                    i + 1,
                    k.trim()
                )));
            }
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ini::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }
}

/// Typed reader over one section that remembers which keys were used.
struct Section<'a> {
    name: &'a str,
    kv: Option<&'a BTreeMap<String, String>>,
    used: Vec<&'a str>,
}

impl<'a> Section<'a> {
    fn new(ini: &'a Ini, name: &'a str) -> Self {
        Section {
            name,
            kv: ini.sections.get(name),
            used: Vec::new(),
        }
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.push(key);
        self.kv.and_then(|kv| kv.get(key)).map(String::as_str)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &'a str, default: T) -> Result<T> {
        let name = self.name;
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::invalid(format!("[{name}] {key}: cannot parse {v:?}"))),
        }
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &'a str) -> Result<Option<T>> {
        let name = self.name;
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("[{name}] {key}: cannot parse {v:?}"))),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(kv) = self.kv {
            if let Some(k) = kv.keys().find(|k| !self.used.contains(&k.as_str())) {
                return Err(Error::invalid(format!("[{}] unknown key {k}", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Cpn,
    Supervised,
    Unsupervised,
    Stereo,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cpn" => Ok(Mode::Cpn),
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            "stereo" => Ok(Mode::Stereo),
            other => Err(Error::invalid(format!("unknown mode {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Cpn => "cpn",
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
            Mode::Stereo => "stereo",
        }
    }

    pub fn uses_prior(&self) -> bool {
        matches!(self, Mode::Unsupervised | Mode::Stereo)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub half_every: usize,
    pub total_steps: usize,
    pub batch: usize,
    /// Validation cadence in steps; the final step is always evaluated.
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    /// Number of generated scenes; every tenth (index % 10 == 9) is held out.
    pub scenes: usize,
    pub scene_seed: u64,
    /// Read frames from a manifest instead of generating them.
    pub manifest: Option<PathBuf>,
    pub density: f64,
    pub augment: AugmentationConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub norms: Vec<NormSpec>,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub norms: NormSpec,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub dcn: DcnConfig,
    pub cpn: CpnConfig,
    pub cpn_checkpoint: Option<PathBuf>,
    pub resume: bool,
    pub aggregation: Aggregation,
    pub ablate: AblateConfig,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{what}: cannot parse {x:?}")))
        })
        .collect()
}

fn parse_norm_grid(s: &str) -> Result<Vec<NormSpec>> {
    s.split(';')
        .filter(|x| !x.trim().is_empty())
        .map(|pair| {
            let v: Vec<u32> = parse_list(pair, "ablate norms")?;
            match v.as_slice() {
                [g, e] => NormSpec::new(*g, *e),
                _ => Err(Error::invalid(format!(
                    "ablate norms: expected gamma,eta pairs, got {pair:?}"
                ))),
            }
        })
        .collect()
}

impl RunConfig {
    /// Defaults for every key; `[run] mode` defaults to supervised.
    pub fn defaults() -> Self {
        RunConfig::from_ini(&Ini::default()).expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_ini(&Ini::load(path)?)
    }

    pub fn from_ini(ini: &Ini) -> Result<Self> {
        let known = [
            "run",
            "losses",
            "optimizer",
            "data",
            "model",
            "eval",
            "ablate",
        ];
        if let Some(s) = ini.sections.keys().find(|s| !known.contains(&s.as_str())) {
            return Err(Error::invalid(format!("unknown config section [{s}]")));
        }

        let mut run = Section::new(ini, "run");
        let mode = Mode::parse(&run.get("mode", "supervised".to_string())?)?;
        let seed = run.get("seed", 0u64)?;
        let out = PathBuf::from(run.get("out", "runs/default".to_string())?);
        let cpn_checkpoint = run.opt::<String>("cpn_checkpoint")?.map(PathBuf::from);
        let resume = run.get("resume", false)?;
        run.finish()?;

        let mut l = Section::new(ini, "losses");
        let norms = NormSpec::new(l.get("gamma", 1)?, l.get("eta", 2)?)?;
        let d = LossWeights::default();
        let weights = LossWeights {
            alpha: l.get("alpha", d.alpha)?,
            beta: l.get("beta", d.beta)?,
            beta_c: l.get("beta_c", d.beta_c)?,
            beta_s: l.get("beta_s", d.beta_s)?,
        };
        weights.validate()?;
        l.finish()?;

        let mut o = Section::new(ini, "optimizer");
        let optim = OptimConfig {
            lr: o.get("lr", 1e-4)?,
            half_every: o.get("half_every", 1000)?,
            total_steps: o.get("total_steps", 5000)?,
            batch: o.get("batch", 4)?,
            eval_every: o.get("eval_every", 500)?,
        };
        o.finish()?;
        if !(optim.lr > 0.0) || optim.batch == 0 || optim.eval_every == 0 {
            return Err(Error::invalid(
                "optimizer: lr, batch and eval_every must be positive",
            ));
        }

        let mut dsec = Section::new(ini, "data");
        let mut scene = SceneConfig::new(dsec.get("height", 64)?, dsec.get("width", 192)?);
        scene.d_min = dsec.get("d_min", scene.d_min)?;
        scene.d_max = dsec.get("d_max", scene.d_max)?;
        scene.focal_px = dsec.opt("focal_px")?;
        scene.baseline_m = dsec.get("baseline_m", scene.baseline_m)?;
        scene.stereo = dsec.get("stereo", mode == Mode::Stereo)?;
        let crop = match (
            dsec.opt::<usize>("crop_height")?,
            dsec.opt::<usize>("crop_width")?,
        ) {
            (Some(h), Some(w)) => Some((h, w)),
            (None, None) => None,
            _ => {
                return Err(Error::invalid(
                    "[data] crop_height and crop_width go together",
                ))
            }
        };
        let augment = AugmentationConfig {
            crop,
            flip_h: dsec.get("flip_h", 0.0)?,
            flip_v: dsec.get("flip_v", 0.0)?,
            hist_eq: dsec.get("hist_eq", false)?,
            sparse_shift: dsec.get("sparse_shift", false)?,
        };
        augment.validate()?;
        let data = DataConfig {
            scene,
            scenes: dsec.get("scenes", 200)?,
            scene_seed: dsec.get("scene_seed", 0)?,
            manifest: dsec.opt::<String>("manifest")?.map(PathBuf::from),
            density: dsec.get("density", 0.05)?,
            augment,
        };
        dsec.finish()?;
        if !(data.density > 0.0 && data.density <= 1.0) {
            return Err(Error::invalid(format!(
                "[data] density must lie in (0, 1], got {}",
                data.density
            )));
        }
        if mode == Mode::Stereo && data.manifest.is_none() && !data.scene.stereo {
            return Err(Error::invalid(
                "stereo mode needs stereo pairs ([data] stereo = true)",
            ));
        }

        let mut m = Section::new(ini, "model");
        let preset = m.get("preset", "desk".to_string())?;
        let (default_scale, default_stages) = match preset.as_str() {
            "desk" => (0.25, 3),
            "full" => (1.0, 5),
            other => return Err(Error::invalid(format!("[model] unknown preset {other}"))),
        };
        let scale = m.get("channel_scale", default_scale)?;
        let stages = m.get("stages", default_stages)?;
        if stages == 0 || stages > BASE_CHANNELS.len() || !(scale > 0.0) {
            return Err(Error::invalid(
                "[model] stages must be 1..=5 and channel_scale positive",
            ));
        }
        let base: Vec<usize> = BASE_CHANNELS[..stages]
            .iter()
            .map(|&c| ((c as f64 * scale).round() as usize).max(1))
            .collect();
        let variant = m.get("unsupervised_variant", mode.uses_prior())?;
        let mut dcn = DcnConfig::with_channels(&base, variant);
        dcn.depth_encoder.k = m.get("k_depth", 0.25)?;
        dcn.image_encoder.k = m.get("k_image", 0.75)?;
        dcn.decoder_k = m.get("decoder_k", 1.0)?;
        dcn.depth_scale = m.get("depth_scale", 10.0)?;
        let cpn_stages = m.get("cpn_stages", 3usize)?;
        let (ch, cw) = data
            .augment
            .crop
            .unwrap_or((data.scene.height, data.scene.width));
        let mut cpn = CpnConfig::new(
            ch,
            cw,
            cpn_stages,
            m.get("cpn_k", 0.125)?,
            m.get("cpn_eta", 2)?,
        );
        cpn.bottleneck_channels = m.get("cpn_bottleneck", default_bottleneck(cpn_stages))?;
        cpn.depth_scale = dcn.depth_scale;
        m.finish()?;
        dcn.validate()?;
        if mode == Mode::Cpn || mode.uses_prior() {
            cpn.validate()?;
        }

        let mut e = Section::new(ini, "eval");
        let aggregation = Aggregation::parse(&e.get("aggregation", "per_image".to_string())?)?;
        e.finish()?;

        let mut a = Section::new(ini, "ablate");
        let ablate = AblateConfig {
            norms: parse_norm_grid(&a.get("norms", "1,1;1,2;2,1;2,2".to_string())?)?,
            alphas: parse_list(
                &a.get("alphas", "0,0.01,0.045,0.1,0.5".to_string())?,
                "ablate alphas",
            )?,
        };
        a.finish()?;

        Ok(RunConfig {
            mode,
            seed,
            out,
            norms,
            weights,
            optim,
            data,
            dcn,
            cpn,
            cpn_checkpoint,
            resume,
            aggregation,
            ablate,
        })
    }
}
