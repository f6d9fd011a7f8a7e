//! Binary checkpoint container.
//!
//! ```text
//! "SPCL1"                    magic
//! u32                        format version
//! u64                        entry count
//! per entry:  u32 name length, name (UTF-8), u32 rank, rank x u64 dims,
//!             prod(dims) x f64 values
//! u64                        metadata length
//! metadata                   UTF-8 `key = value` lines
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::log::LogRow;
use crate::error::{Error, Result};
use crate::losses::{PseudoLabelMap, ThresholdSpace, Thresholds};
use crate::prototype::PrototypeBank;
use crate::segnet::{Param, SegModel};
use crate::synthdata::io::parse_key_values;

pub const MAGIC: &[u8; 5] = b"SPCL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Source-only warm-up.
    Warmup,
    /// Prototype contrastive adaptation.
    Adapt,
    /// Self-training on frozen pseudo labels.
    SelfTrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Adapt => "adapt",
            Stage::SelfTrain => "selftrain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "warmup" => Some(Stage::Warmup),
            "adapt" => Some(Stage::Adapt),
            "selftrain" => Some(Stage::SelfTrain),
            _ => None,
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Stage::Warmup => 1,
            Stage::Adapt => 2,
            Stage::SelfTrain => 3,
        }
    }
}

/// Named raw array.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Completed iterations within `stage`.
    pub iteration: usize,
    /// The stage ran to its configured length.
    pub complete: bool,
    pub seed: u64,
    pub config_hash: String,
    pub feature_dim: usize,
    pub classes: usize,
    pub params: Vec<Param>,
    pub momentum: Vec<Vec<f64>>,
    pub bank: Option<PrototypeBank>,
    pub thresholds: Option<Thresholds>,
    pub pseudo: Option<Vec<PseudoLabelMap>>,
    /// Loss sums and iteration count since the last log row.
    pub loss_window: [f64; 4],
    pub log: Vec<LogRow>,
}

fn field(field: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    fn entries(&self) -> Vec<Entry> {
        let mut out = vec![Entry {
            name: "state/loss_window".into(),
            shape: vec![4],
            data: self.loss_window.to_vec(),
        }];
        for (p, m) in self.params.iter().zip(&self.momentum) {
            out.push(Entry {
                name: format!("param/{}", p.name),
                shape: p.shape.clone(),
                data: p.values.clone(),
            });
            out.push(Entry {
                name: format!("momentum/{}", p.name),
                shape: p.shape.clone(),
                data: m.clone(),
            });
        }
        if let Some(bank) = &self.bank {
            out.push(Entry {
                name: "bank/mu".into(),
                shape: vec![bank.classes(), bank.dim()],
                data: bank.storage().to_vec(),
            });
            out.push(Entry {
                name: "bank/initialized".into(),
                shape: vec![bank.classes()],
                data: bank
                    .initialized()
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect(),
            });
        }
        if let Some(t) = &self.thresholds {
            out.push(Entry {
                name: format!("thresholds/{}", t.space.name()),
                shape: vec![t.values.len()],
                data: t.values.clone(),
            });
        }
        for (i, p) in self.pseudo.iter().flatten().enumerate() {
            out.push(Entry {
                name: format!("pseudo/{i}"),
                shape: vec![p.height, p.width],
                data: p.values.iter().map(|&v| v as f64).collect(),
            });
        }
        out
    }

    fn metadata(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version = {FORMAT_VERSION}");
        let _ = writeln!(s, "stage = {}", self.stage.name());
        let _ = writeln!(s, "iteration = {}", self.iteration);
        let _ = writeln!(s, "complete = {}", self.complete);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(
            s,
            "rng = chacha8 key={} stream={} counter={}",
            self.seed,
            self.stage.tag(),
            self.iteration
        );
        if let Some(bank) = &self.bank {
            let _ = writeln!(s, "bank_alpha = {}", bank.alpha());
        }
        if let Some(p) = &self.pseudo {
            let _ = writeln!(s, "pseudo_count = {}", p.len());
        }
        let _ = writeln!(s, "log_rows = {}", self.log.len());
        for (i, row) in self.log.iter().enumerate() {
            let _ = writeln!(s, "log.{i:06} = {}", row.to_csv());
        }
        s
    }

    /// Model carrying the stored parameters.
    pub fn model(&self) -> Result<SegModel> {
        let mut model = SegModel::new(self.feature_dim, self.classes, self.seed);
        if model.params().len() != self.params.len() {
            return Err(field("param", "parameter table does not match the model"));
        }
        for (dst, src) in model.params_mut().iter_mut().zip(&self.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(field(
                    &format!("param/{}", src.name),
                    format!("expected {} {:?}", dst.name, dst.shape),
                ));
            }
            dst.values.clone_from(&src.values);
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let entries = self.entries();
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for e in &entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = self.metadata();
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| field("file", format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5, "magic")? != MAGIC {
            return Err(field("magic", "expected SPCL1"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(field(
                "version",
                format!("unsupported format version {version}"),
            ));
        }
        let count = r.u64("entry count")?;
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        let mut order = Vec::new();
        for _ in 0..count {
            let len = r.u32("entry name length")? as usize;
            let name = String::from_utf8(r.take(len, "entry name")?.to_vec())
                .map_err(|_| field("entry name", "not UTF-8"))?;
            let rank = r.u32("entry rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("entry shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| field("entry shape", "overflow"))?,
                "entry data",
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            order.push(name.clone());
            entries.insert(name.clone(), Entry { name, shape, data });
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| field("metadata", "not UTF-8"))?;
        let kv = parse_key_values(meta).map_err(|e| field("metadata", e.to_string()))?;
        let get = |k: &str| kv.get(k).ok_or_else(|| field(k, "missing"));
        let num =
            |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| field(k, "not an integer")) };

        if num("format_version")? != FORMAT_VERSION as u64 {
            return Err(field("format_version", "metadata disagrees with header"));
        }
        let stage = Stage::parse(get("stage")?).ok_or_else(|| field("stage", "unknown stage"))?;
        let feature_dim = num("feature_dim")? as usize;
        let classes = num("classes")? as usize;

        let mut params = Vec::new();
        let mut momentum = Vec::new();
        for name in &order {
            if let Some(pname) = name.strip_prefix("param/") {
                let e = &entries[name];
                let m = entries
                    .get(&format!("momentum/{pname}"))
                    .ok_or_else(|| field(&format!("momentum/{pname}"), "missing"))?;
                if m.shape != e.shape {
                    return Err(field(&m.name, "shape differs from parameter"));
                }
                params.push(Param {
                    name: pname.to_string(),
                    shape: e.shape.clone(),
                    values: e.data.clone(),
                });
                momentum.push(m.data.clone());
            }
        }
        let bank = match (entries.get("bank/mu"), entries.get("bank/initialized")) {
            (Some(mu), Some(init)) => {
                let alpha: f64 = get("bank_alpha")?
                    .parse()
                    .map_err(|_| field("bank_alpha", "not a number"))?;
                let flags = init.data.iter().map(|&v| v != 0.0).collect();
                Some(
                    PrototypeBank::from_parts(classes, feature_dim, alpha, mu.data.clone(), flags)
                        .map_err(|e| field("bank/mu", e.to_string()))?,
                )
            }
            (None, None) => None,
            _ => return Err(field("bank", "incomplete prototype bank")),
        };
        let thresholds = [ThresholdSpace::Feature, ThresholdSpace::Output]
            .iter()
            .find_map(|&space| {
                entries
                    .get(&format!("thresholds/{}", space.name()))
                    .map(|e| Thresholds {
                        values: e.data.clone(),
                        space,
                    })
            });
        let pseudo = match kv.get("pseudo_count") {
            None => None,
            Some(n) => {
                let n: usize = n
                    .parse()
                    .map_err(|_| field("pseudo_count", "not an integer"))?;
                let maps = (0..n)
                    .map(|i| {
                        let key = format!("pseudo/{i}");
                        let e = entries.get(&key).ok_or_else(|| field(&key, "missing"))?;
                        if e.shape.len() != 2 {
                            return Err(field(&key, "expected [H, W]"));
                        }
                        Ok(PseudoLabelMap {
                            height: e.shape[0],
                            width: e.shape[1],
                            values: e.data.iter().map(|&v| v as u8).collect(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(maps)
            }
        };
        let window = entries
            .get("state/loss_window")
            .filter(|e| e.data.len() == 4)
            .ok_or_else(|| field("state/loss_window", "missing or malformed"))?;
        let loss_window = [
            window.data[0],
            window.data[1],
            window.data[2],
            window.data[3],
        ];
        let complete = get("complete")?
            .parse()
            .map_err(|_| field("complete", "not a boolean"))?;
        let rows = num("log_rows")? as usize;
        let log = (0..rows)
            .map(|i| {
                let key = format!("log.{i:06}");
                LogRow::parse(get(&key)?).map_err(|e| field(&key, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            stage,
            iteration: num("iteration")? as usize,
            complete,
            seed: num("seed")?,
            config_hash: get("config_hash")?.clone(),
            feature_dim,
            classes,
            params,
            momentum,
            bank,
            thresholds,
            pseudo,
            loss_window,
            log,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| field(what, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegModel;

    fn sample() -> Checkpoint {
        let model = SegModel::new(4, 3, 1);
        let mut bank = PrototypeBank::new(3, 4, 0.1).unwrap();
        let f = vec![1.0, 2.0, 0.0, 0.5];
        let m = crate::prototype::Mask::new(1, 1, vec![1]).unwrap();
        bank.initialize([(&f[..], &m)]).unwrap();
        Checkpoint {
            stage: Stage::SelfTrain,
            iteration: 7,
            complete: false,
            seed: 42,
            config_hash: "abc123".into(),
            feature_dim: 4,
            classes: 3,
            params: model.params().to_vec(),
            momentum: model
                .params()
                .iter()
                .map(|p| vec![0.25; p.values.len()])
                .collect(),
            bank: Some(bank),
            thresholds: Some(Thresholds::uniform(3, 0.7, ThresholdSpace::Output)),
            pseudo: Some(vec![PseudoLabelMap {
                height: 1,
                width: 2,
                values: vec![2, 255],
            }]),
            loss_window: [1.5, 0.25, 0.0, 3.0],
            log: vec![LogRow {
                stage: Stage::Warmup,
                iter: 3,
                split: "target".into(),
                miou: 0.5,
                miou_tail: None,
                loss_seg: 1.25,
                loss_cl_s: 0.0,
                loss_cl_t: 0.1,
                lr: 0.01,
            }],
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..5], b"SPCL1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn corrupt_headers_name_the_field() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        let mut bytes = sample().to_bytes();
        bytes[5] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..40])
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
