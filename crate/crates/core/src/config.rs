//! Experiment configuration: a plain `key = value` file with `[section]`
//! headers. `#` and `;` start comments. Every key is optional.
//!
//! ```text
//! seed = 7
//! out = runs/demo
//!
//! [dataset]
//! groups = 8
//! points = 8000
//!
//! [cluster]
//! k = 8
//! m_fine = 64
//!
//! [experts]
//! ddpm_ids = 0, 3
//! steps = 2000
//! ```

use std::path::{Path, PathBuf};

use crate::conversion::{ConversionConfig, ScalingMode};
use crate::error::{Error, Result};
use crate::evaluation::StudyConfig;
use crate::partition::{Metric, MixtureSpec};
use crate::sampler::{SamplerConfig, Selection};
use crate::schedules::Schedule;
use crate::training::{ObjectiveMix, RouterConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Ring-of-groups mixture generated from the global seed.
    Ring { groups: usize, sub_modes: usize, radius: f64, sub_radius: f64, variance: f64, points: usize },
    /// Points read from a dataset CSV.
    Csv(PathBuf),
}

impl DatasetSource {
    pub fn spec(&self) -> Result<Option<MixtureSpec>> {
        match self {
            DatasetSource::Ring { groups, sub_modes, radius, sub_radius, variance, .. } => {
                MixtureSpec::ring_of_groups(*groups, *sub_modes, *radius, *sub_radius, *variance).map(Some)
            }
            DatasetSource::Csv(_) => Ok(None),
        }
    }
}

/// Which conditions the `sample` command draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionPlan {
    Unconditional,
    /// Trajectory `i` uses label `i mod cond_count`.
    Cycle,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub k: usize,
    pub m_fine: usize,
    pub metric: Metric,
    pub ddpm_ids: Vec<usize>,
    pub eps_schedule: Schedule,
    /// Expert template; objective and schedule come from the mix.
    pub train: TrainConfig,
    pub router: RouterConfig,
    pub sampler: SamplerConfig,
    pub conditions: ConditionPlan,
    /// `None` uses each ε-expert's schedule defaults.
    pub conversion: Option<ConversionConfig>,
    pub study: StudyConfig,
    pub study_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let study = StudyConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("hddm-out"),
            dataset: DatasetSource::Ring {
                groups: study.groups,
                sub_modes: study.sub_modes,
                radius: study.radius,
                sub_radius: study.sub_radius,
                variance: study.variance,
                points: study.points,
            },
            k: study.k,
            m_fine: study.m_fine,
            metric: study.metric,
            ddpm_ids: vec![0, 3],
            eps_schedule: Schedule::Cosine,
            train: study.train.clone(),
            router: study.router.clone(),
            sampler: SamplerConfig { batch: 256, ..study.sampler.clone() },
            conditions: ConditionPlan::Cycle,
            conversion: None,
            study,
            study_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

struct Entry<'a> {
    line: usize,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::ConfigParse { line: self.line, msg: msg.into() }
    }

    fn parse<T: std::str::FromStr>(&self, what: &str) -> Result<T> {
        self.value.parse().map_err(|_| self.err(format!("`{}` is not a valid {what}", self.value)))
    }

    fn usize(&self) -> Result<usize> {
        self.parse("non-negative integer")
    }

    fn f64(&self) -> Result<f64> {
        let v: f64 = self.parse("number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err("value must be finite"))
        }
    }

    fn optional_f64(&self) -> Result<Option<f64>> {
        if self.value.eq_ignore_ascii_case("off") {
            Ok(None)
        } else {
            self.f64().map(Some)
        }
    }

    fn list<T: std::str::FromStr>(&self, what: &str) -> Result<Vec<T>> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value.split(',').map(|p| p.trim().parse().map_err(|_| self.err(format!("`{}` is not a valid {what}", p.trim())))).collect()
    }

    fn wrap<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| self.err(e.to_string()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf(), hint: "pass an existing file with --config".into() });
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if let DatasetSource::Csv(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut ring = match &cfg.dataset {
            DatasetSource::Ring { groups, sub_modes, radius, sub_radius, variance, points } => {
                (*groups, *sub_modes, *radius, *sub_radius, *variance, *points)
            }
            DatasetSource::Csv(_) => unreachable!("default is a ring"),
        };
        let mut csv_path: Option<PathBuf> = None;
        let mut conversion = ConversionConfig::default();
        let mut conversion_set = false;
        let mut section = String::new();
        let mut seen: Vec<(String, String)> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(Error::ConfigParse { line, msg: "unterminated section header".into() })?;
                section = name.trim().to_ascii_lowercase();
                if !["dataset", "cluster", "experts", "router", "sampler", "conversion", "study"].contains(&section.as_str()) {
                    return Err(Error::ConfigParse { line, msg: format!("unknown section [{section}]") });
                }
                continue;
            }
            let (key, value) =
                content.split_once('=').ok_or(Error::ConfigParse { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let key = key.trim().to_ascii_lowercase();
            if seen.iter().any(|(s, k)| *s == section && *k == key) {
                return Err(Error::ConfigParse { line, msg: format!("duplicate key `{key}`") });
            }
            seen.push((section.clone(), key.clone()));
            let e = Entry { line, value: value.trim() };
            let unknown = || {
                e.err(format!(
                    "unknown key `{key}` in {}",
                    if section.is_empty() { "top level".to_string() } else { format!("[{section}]") }
                ))
            };
            match (section.as_str(), key.as_str()) {
                ("", "seed") => cfg.seed = e.parse("seed")?,
                ("", "out") => cfg.out_dir = PathBuf::from(e.value),

                ("dataset", "path") => csv_path = Some(PathBuf::from(e.value)),
                ("dataset", "groups") => ring.0 = e.usize()?,
                ("dataset", "sub_modes") => ring.1 = e.usize()?,
                ("dataset", "radius") => ring.2 = e.f64()?,
                ("dataset", "sub_radius") => ring.3 = e.f64()?,
                ("dataset", "variance") => ring.4 = e.f64()?,
                ("dataset", "points") => ring.5 = e.usize()?,

                ("cluster", "k") => cfg.k = e.usize()?,
                ("cluster", "m_fine") => cfg.m_fine = e.usize()?,
                ("cluster", "metric") => cfg.metric = e.wrap(Metric::parse(e.value))?,

                ("experts", "ddpm_ids") => cfg.ddpm_ids = e.list("expert id")?,
                ("experts", "eps_schedule") => cfg.eps_schedule = e.wrap(Schedule::parse(e.value))?,
                ("experts", "steps") => cfg.train.steps = e.usize()?,
                ("experts", "batch_size") => cfg.train.batch_size = e.usize()?,
                ("experts", "lr") => cfg.train.lr = e.f64()?,
                ("experts", "warmup_steps") => cfg.train.warmup_steps = e.usize()?,
                ("experts", "ema_decay") => cfg.train.ema_decay = e.f64()?,
                ("experts", "cfg_drop_prob") => cfg.train.cfg_drop_prob = e.f64()?,
                ("experts", "clip_norm") => cfg.train.clip_norm = e.f64()?,
                ("experts", "hidden") => cfg.train.hidden = e.usize()?,
                ("experts", "blocks") => cfg.train.blocks = e.usize()?,
                ("experts", "eval_every") => cfg.train.eval_every = e.usize()?,

                ("router", "steps") => cfg.router.steps = e.usize()?,
                ("router", "batch_size") => cfg.router.batch_size = e.usize()?,
                ("router", "lr") => cfg.router.lr = e.f64()?,
                ("router", "warmup_steps") => cfg.router.warmup_steps = e.usize()?,
                ("router", "weight_decay") => cfg.router.weight_decay = e.f64()?,
                ("router", "clip_norm") => cfg.router.clip_norm = e.f64()?,
                ("router", "hidden") => cfg.router.hidden = e.usize()?,
                ("router", "blocks") => cfg.router.blocks = e.usize()?,

                ("sampler", "steps") => cfg.sampler.steps = e.usize()?,
                ("sampler", "cfg_scale") => cfg.sampler.cfg_scale = e.f64()?,
                ("sampler", "selection") => cfg.sampler.selection = e.wrap(Selection::parse(e.value))?,
                ("sampler", "batch") => cfg.sampler.batch = e.usize()?,
                ("sampler", "conditions") => {
                    cfg.conditions = match e.value.to_ascii_lowercase().as_str() {
                        "none" => ConditionPlan::Unconditional,
                        "cycle" => ConditionPlan::Cycle,
                        _ => ConditionPlan::Fixed(e.parse("condition label, `none` or `cycle`")?),
                    }
                }

                ("conversion", "clamp") => (conversion.clamp, conversion_set) = (e.optional_f64()?, true),
                ("conversion", "alpha_floor") => (conversion.alpha_floor, conversion_set) = (e.optional_f64()?, true),
                ("conversion", "scaling") => (conversion.scaling, conversion_set) = (e.wrap(ScalingMode::parse(e.value))?, true),
                ("conversion", "derivative_h") => (conversion.derivative_h, conversion_set) = (e.f64()?, true),

                ("study", "seeds") => cfg.study_seeds = e.list("seed")?,
                ("study", "samples") => cfg.study.samples = e.usize()?,
                ("study", "samples_per_condition") => cfg.study.samples_per_condition = e.usize()?,
                ("study", "thresholds") => cfg.study.thresholds = e.list("threshold")?,
                ("study", "mono_batch_factor") => cfg.study.mono_batch_factor = e.usize()?,
                ("study", "pair_shard") => cfg.study.pair_shard = e.usize()?,
                ("study", "pair_eps_schedule") => cfg.study.pair_eps_schedule = e.wrap(Schedule::parse(e.value))?,
                ("study", "source_steps") => cfg.study.source_steps = e.usize()?,
                ("study", "finetune_steps") => cfg.study.finetune_steps = e.usize()?,
                _ => return Err(unknown()),
            }
        }

        cfg.dataset = match csv_path {
            Some(p) => DatasetSource::Csv(p),
            None => DatasetSource::Ring {
                groups: ring.0,
                sub_modes: ring.1,
                radius: ring.2,
                sub_radius: ring.3,
                variance: ring.4,
                points: ring.5,
            },
        };
        if conversion_set {
            cfg.conversion = Some(conversion);
        }
        cfg.sampler.conversion = cfg.conversion;
        cfg.sync_study();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the shared settings into the study configuration.
    fn sync_study(&mut self) {
        if let DatasetSource::Ring { groups, sub_modes, radius, sub_radius, variance, points } = self.dataset {
            (self.study.groups, self.study.sub_modes, self.study.radius) = (groups, sub_modes, radius);
            (self.study.sub_radius, self.study.variance, self.study.points) = (sub_radius, variance, points);
        }
        self.study.k = self.k;
        self.study.m_fine = self.m_fine;
        self.study.metric = self.metric;
        self.study.train = self.train.clone();
        self.study.router = self.router.clone();
        self.study.sampler = SamplerConfig { batch: self.study.sampler.batch, ..self.sampler.clone() };
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.m_fine {
            return Err(Error::Config(format!("need 1 <= K ({}) <= M_fine ({})", self.k, self.m_fine)));
        }
        if let Some(bad) = self.ddpm_ids.iter().find(|&&i| i >= self.k) {
            return Err(Error::Config(format!("DDPM expert id {bad} out of range for K = {}", self.k)));
        }
        if self.study.pair_shard >= self.k {
            return Err(Error::Config(format!("pair shard {} out of range for K = {}", self.study.pair_shard, self.k)));
        }
        self.sampler.validate(self.k)?;
        if let Some(c) = &self.conversion {
            c.validate()?;
        }
        if self.router.steps > 0 && self.router.batch_size == 0 {
            return Err(Error::Config("router batch size must be positive".into()));
        }
        self.dataset.spec()?;
        self.train.validate()
    }

    pub fn mix(&self) -> Result<ObjectiveMix> {
        ObjectiveMix::new(self.k, &self.ddpm_ids, self.eps_schedule.clone())
    }

    /// Expert template seeded from the global seed.
    pub fn expert_template(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig { seed: self.seed, ..self.router.clone() }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { seed: self.seed, ..self.sampler.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Objective;

    #[test]
    fn empty_is_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn sections_and_comments() {
        let text = "seed = 9 # global\nout = x\n\n[cluster]\nk = 4 ; four\nm_fine = 16\n[experts]\nddpm_ids = 1\nsteps = 10\n\
                    [sampler]\nselection = threshold:0.4\nconditions = none\n[conversion]\nclamp = off\n[study]\nseeds = 3, 4\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.out_dir, PathBuf::from("x"));
        assert_eq!((c.k, c.m_fine, c.study.k), (4, 16, 4));
        assert_eq!(c.mix().unwrap().objectives[1], Objective::Epsilon);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.study.train.steps, 10);
        assert_eq!(c.conditions, ConditionPlan::Unconditional);
        assert_eq!(c.conversion.unwrap().clamp, None);
        assert_eq!(c.sampler.conversion, c.conversion);
        assert_eq!(c.study_seeds, vec![3, 4]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("[cluster]\nk = x\n", 2),
            ("\n\n[nope]\n", 3),
            ("[router]\nsteps = 1\nsteps = 2\n", 3),
            ("[experts]\nbogus = 1\n", 2),
            ("just text\n", 1),
            ("[sampler\n", 1),
            ("[experts]\neps_schedule = spiral\n", 2),
        ];
        for (text, want) in cases {
            match ExperimentConfig::parse(text) {
                Err(Error::ConfigParse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn inconsistent_k_is_rejected() {
        assert!(matches!(ExperimentConfig::parse("[cluster]\nk = 8\nm_fine = 4\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("[cluster]\nk = 2\n[experts]\nddpm_ids = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(ExperimentConfig::load(Path::new("/nonexistent/cfg.ini")), Err(Error::MissingFile { .. })));
    }
}
