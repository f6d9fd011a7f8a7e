//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt            key = value lines
//! <root>/<domain>/img_<i>.ppm    binary 8-bit RGB (P6)
//! <root>/<domain>/lab_<i>.pgm    binary 8-bit gray (P5), value = class id
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    class_color, generate_sample, Domain, DomainShiftParams, Image, LabelMap, Sample, SceneSpec,
};
use crate::error::{Error, Result};
use crate::prototype::IGNORE;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an image as binary PPM, with optional `#` comment lines.
pub fn encode_ppm(image: &Image, comments: &[String]) -> Vec<u8> {
    let mut out = b"P6\n".to_vec();
    for c in comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n255\n", image.width, image.height).as_bytes());
    out.extend(image.data.iter().map(|&v| quantize(v)));
    out
}

/// Number of fixed palette entries used for rendering.
pub const PALETTE_SIZE: usize = 8;

/// `palette 0=r,g,b 1=r,g,b ...` with 8-bit components.
pub fn palette_comment() -> String {
    let entries: Vec<String> = (0..PALETTE_SIZE)
        .map(|c| {
            let [r, g, b] = class_color(c).map(quantize);
            format!("{c}={r},{g},{b}")
        })
        .collect();
    format!("palette {}", entries.join(" "))
}

/// Color rendering of a class map as PPM; IGNORE is black and classes past
/// the palette wrap around it.
pub fn render_labels(labels: &LabelMap) -> Vec<u8> {
    let data = labels
        .data
        .iter()
        .flat_map(|&c| {
            if c == IGNORE {
                [0.0; 3]
            } else {
                class_color(c as usize % PALETTE_SIZE)
            }
        })
        .collect();
    let img = Image {
        height: labels.height,
        width: labels.width,
        data,
    };
    encode_ppm(&img, &[palette_comment()])
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

/// Parses a binary netpbm header; returns (magic, width, height, payload).
fn parse_netpbm<'a>(bytes: &'a [u8], what: &str) -> Result<(&'a [u8], usize, usize, &'a [u8])> {
    let bad = |msg: &str| Error::Dataset(format!("{what}: {msg}"));
    let mut pos = 0;
    let mut tokens: Vec<&[u8]> = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(&bytes[start..pos]);
    }
    pos += 1;
    let num = |t: &[u8]| -> Result<usize> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("non-numeric header field"))
    };
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    Ok((tokens[0], w, h, bytes.get(pos..).unwrap_or(&[])))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (magic, w, h, data) = parse_netpbm(bytes, "ppm")?;
    if magic != b"P6" || data.len() != w * h * 3 {
        return Err(Error::Dataset("ppm: bad magic or payload size".into()));
    }
    Image::new(h, w, data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (magic, w, h, data) = parse_netpbm(bytes, "pgm")?;
    if magic != b"P5" || data.len() != w * h {
        return Err(Error::Dataset("pgm: bad magic or payload size".into()));
    }
    Ok(LabelMap {
        height: h,
        width: w,
        data: data.to_vec(),
    })
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Manifest text for a generated dataset.
pub fn manifest_text(spec: &SceneSpec, shift: &DomainShiftParams, count: usize) -> String {
    let mut lines = vec![
        format!("classes = {}", spec.classes),
        format!("height = {}", spec.height),
        format!("width = {}", spec.width),
        format!("source_count = {count}"),
        format!("target_count = {count}"),
        format!("seed = {}", spec.seed),
        format!("min_shapes = {}", spec.min_shapes),
        format!("max_shapes = {}", spec.max_shapes),
        format!(
            "class_weights = {}",
            join(spec.class_weights.iter().copied())
        ),
        format!(
            "shift.color_matrix = {}",
            join(shift.color_matrix.iter().flatten().copied())
        ),
        format!("shift.color_bias = {}", join(shift.color_bias)),
        format!("shift.gamma = {}", shift.gamma),
        format!("shift.noise_std = {}", shift.noise_std),
        format!("shift.texture_gain = {}", shift.texture_gain),
    ];
    lines.push(String::new());
    lines.join("\n")
}

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Writes `count` scenes per domain plus the manifest.
pub fn write_dataset(
    root: &Path,
    spec: &SceneSpec,
    shift: &DomainShiftParams,
    count: usize,
) -> Result<()> {
    spec.validate()?;
    for domain in [Domain::Source, Domain::Target] {
        let dir = root.join(domain.name());
        fs::create_dir_all(&dir)?;
        for i in 0..count {
            let s = generate_sample(spec, shift, domain, i as u64)?;
            fs::write(dir.join(format!("img_{i}.ppm")), encode_ppm(&s.image, &[]))?;
            fs::write(dir.join(format!("lab_{i}.pgm")), encode_pgm(&s.labels))?;
        }
    }
    fs::write(root.join("manifest.txt"), manifest_text(spec, shift, count))?;
    Ok(())
}

/// Read access to a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    root: PathBuf,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub seed: u64,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("manifest.txt"))
            .map_err(|e| Error::Dataset(format!("{}: {e}", root.join("manifest.txt").display())))?;
        let kv = parse_key_values(&text)?;
        let get = |k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Dataset(format!("manifest: missing or bad `{k}`")))
        };
        Ok(DatasetDir {
            root: root.to_path_buf(),
            classes: get("classes")? as usize,
            height: get("height")? as usize,
            width: get("width")? as usize,
            source_count: get("source_count")? as usize,
            target_count: get("target_count")? as usize,
            seed: get("seed")?,
        })
    }

    fn count(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.source_count,
            Domain::Target => self.target_count,
        }
    }

    pub fn image(&self, domain: Domain, index: usize) -> Result<Image> {
        let path = self
            .root
            .join(domain.name())
            .join(format!("img_{index}.ppm"));
        let img = decode_ppm(&fs::read(&path)?)?;
        if img.height != self.height || img.width != self.width {
            return Err(Error::Dataset(format!(
                "{}: extents differ from manifest",
                path.display()
            )));
        }
        Ok(img)
    }

    pub fn labels(&self, domain: Domain, index: usize) -> Result<LabelMap> {
        let path = self
            .root
            .join(domain.name())
            .join(format!("lab_{index}.pgm"));
        let l = decode_pgm(&fs::read(&path)?)?;
        if l.data.iter().any(|&c| c as usize >= self.classes) {
            return Err(Error::Dataset(format!(
                "{}: label outside class range",
                path.display()
            )));
        }
        Ok(l)
    }

    /// Images only; labels are not touched.
    pub fn images(&self, domain: Domain) -> Result<Vec<Image>> {
        (0..self.count(domain))
            .map(|i| self.image(domain, i))
            .collect()
    }

    /// Images with labels.
    pub fn samples(&self, domain: Domain) -> Result<Vec<Sample>> {
        (0..self.count(domain))
            .map(|i| {
                Ok(Sample {
                    image: self.image(domain, i)?,
                    labels: self.labels(domain, i)?,
                    domain,
                    index: i as u64,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_round_trip_with_comments() {
        let img = Image::new(2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let bytes = encode_ppm(&img, &["palette 0=1,2,3".into()]);
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let lab = LabelMap {
            height: 2,
            width: 2,
            data: vec![0, 3, 255, 1],
        };
        assert_eq!(decode_pgm(&encode_pgm(&lab)).unwrap(), lab);
        assert!(decode_pgm(&bytes).is_err());
    }

    #[test]
    fn rendering_carries_the_palette() {
        let lab = LabelMap {
            height: 1,
            width: 3,
            data: vec![0, 1, IGNORE],
        };
        let bytes = render_labels(&lab);
        let text = String::from_utf8_lossy(&bytes[..60]);
        assert!(text.contains("# palette 0="), "{text}");
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(&img.data[6..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn key_values_skip_comments() {
        let kv = parse_key_values("# hi\na = 1\n\nb=two # trailing\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two");
        assert!(parse_key_values("novalue\n").is_err());
    }
}
