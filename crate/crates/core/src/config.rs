//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Training keys are those of [`TrainConfig::to_kv`]. Scene keys carry a
//! `scene.` prefix, shift keys a `shift.` prefix, and `data` / `out` name
//! paths. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synthdata::io::parse_key_values;
use crate::synthdata::{DomainShiftParams, SceneSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub shift: DomainShiftParams,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            scene: SceneSpec::desk(0),
            shift: DomainShiftParams::default_shift(),
            data: None,
            out: None,
        }
    }
}

fn floats(key: &str, v: &str, n: usize) -> Result<Vec<f64>> {
    let out: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad number list {v:?} for `{key}`")))?;
    if n > 0 && out.len() != n {
        return Err(Error::Config(format!(
            "`{key}` needs {n} values, got {}",
            out.len()
        )));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(parse_key_values(text)?.into_iter())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let pairs = overrides
            .iter()
            .map(|o| {
                let o = o.as_ref();
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply(pairs.into_iter())
    }

    /// Presets and the class count go first so that individual keys refine them.
    fn apply(&mut self, pairs: impl Iterator<Item = (String, String)>) -> Result<()> {
        let mut pairs: Vec<(String, String)> = pairs.collect();
        pairs.sort_by_key(|(k, _)| !matches!(k.as_str(), "shift.preset" | "scene.classes"));
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "scene.height" => self.scene.height = num(key, value)?,
            "scene.width" => self.scene.width = num(key, value)?,
            "scene.classes" => self.scene = self.scene.clone().with_classes(num(key, value)?),
            "scene.min_shapes" => self.scene.min_shapes = num(key, value)?,
            "scene.max_shapes" => self.scene.max_shapes = num(key, value)?,
            "scene.seed" => self.scene.seed = num(key, value)?,
            "scene.class_weights" => self.scene.class_weights = floats(key, value, 0)?,
            "shift.preset" => self.shift = DomainShiftParams::preset(value)?,
            "shift.color_matrix" => {
                let m = floats(key, value, 9)?;
                for (i, row) in self.shift.color_matrix.iter_mut().enumerate() {
                    row.copy_from_slice(&m[3 * i..3 * i + 3]);
                }
            }
            "shift.color_bias" => self
                .shift
                .color_bias
                .copy_from_slice(&floats(key, value, 3)?),
            "shift.gamma" => self.shift.gamma = num(key, value)?,
            "shift.noise_std" => self.shift.noise_std = num(key, value)?,
            "shift.texture_gain" => self.shift.texture_gain = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()
    }

    /// Canonical text form; parses back to an equal configuration.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines: Vec<String> = self
            .train
            .to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect();
        let s = &self.scene;
        lines.push(format!("scene.height = {}", s.height));
        lines.push(format!("scene.width = {}", s.width));
        lines.push(format!("scene.classes = {}", s.classes));
        lines.push(format!("scene.min_shapes = {}", s.min_shapes));
        lines.push(format!("scene.max_shapes = {}", s.max_shapes));
        lines.push(format!("scene.seed = {}", s.seed));
        lines.push(format!("scene.class_weights = {}", join(&s.class_weights)));
        let m: Vec<f64> = self.shift.color_matrix.iter().flatten().copied().collect();
        lines.push(format!("shift.color_matrix = {}", join(&m)));
        lines.push(format!(
            "shift.color_bias = {}",
            join(&self.shift.color_bias)
        ));
        lines.push(format!("shift.gamma = {}", self.shift.gamma));
        lines.push(format!("shift.noise_std = {}", self.shift.noise_std));
        lines.push(format!("shift.texture_gain = {}", self.shift.texture_gain));
        if let Some(d) = &self.data {
            lines.push(format!("data = {}", d.display()));
        }
        if let Some(o) = &self.out {
            lines.push(format!("out = {}", o.display()));
        }
        lines.push(String::new());
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut cfg =
            RunConfig::parse("# desk\nlambda = 0.5\nshift.gamma = 1.1\nshift.preset = none\n")
                .unwrap();
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.shift.gamma, 1.1);
        assert_eq!(
            cfg.shift.color_matrix,
            DomainShiftParams::identity().color_matrix
        );
        cfg.apply_overrides(&["lambda=0"]).unwrap();
        assert_eq!(cfg.train.lambda, 0.0);
        assert!(cfg.apply_overrides(&["lambda"]).is_err());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::parse("lamda = 1\n").unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
        assert!(RunConfig::parse("shift.color_bias = 1,2\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.alpha = 0.25;
        cfg.scene.seed = 9;
        cfg.data = Some("d".into());
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
