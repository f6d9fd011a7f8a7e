use super::Stage;
use crate::error::{Error, Result};

pub const HEADER: &str = "stage,iter,split,miou,miou_tail,loss_seg,loss_cl_s,loss_cl_t,lr";

/// One evaluation row of the metrics log. Loss columns are means over the
/// iterations since the previous row of the same stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: Stage,
    pub iter: usize,
    pub split: String,
    pub miou: f64,
    pub miou_tail: Option<f64>,
    pub loss_seg: f64,
    pub loss_cl_s: f64,
    pub loss_cl_t: f64,
    pub lr: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.stage.name(),
            self.iter,
            self.split,
            self.miou,
            opt(self.miou_tail),
            self.loss_seg,
            self.loss_cl_s,
            self.loss_cl_t,
            self.lr
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Training(format!("log row {line:?}: {m}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(bad("expected 9 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let tail = num(f[4])?;
        Ok(LogRow {
            stage: Stage::parse(f[0]).ok_or_else(|| bad("unknown stage"))?,
            iter: f[1].parse().map_err(|_| bad("bad iteration"))?,
            split: f[2].to_string(),
            miou: num(f[3])?,
            miou_tail: (!tail.is_nan()).then_some(tail),
            loss_seg: num(f[5])?,
            loss_cl_s: num(f[6])?,
            loss_cl_t: num(f[7])?,
            lr: num(f[8])?,
        })
    }
}

/// Full CSV text with header.
pub fn to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trip() {
        let row = LogRow {
            stage: Stage::Adapt,
            iter: 1500,
            split: "target".into(),
            miou: 0.1 + 0.2,
            miou_tail: Some(1.0 / 3.0),
            loss_seg: 0.5,
            loss_cl_s: 2.0f64.ln(),
            loss_cl_t: 0.0,
            lr: 1e-3,
        };
        assert_eq!(LogRow::parse(&row.to_csv()).unwrap(), row);
        let none = LogRow {
            miou_tail: None,
            ..row
        };
        assert!(none.to_csv().contains(",nan,"));
        assert_eq!(LogRow::parse(&none.to_csv()).unwrap(), none);
        assert!(to_csv(&[none]).starts_with(HEADER));
    }
}
