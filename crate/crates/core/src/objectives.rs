//! Programmatic image scorers used as search objectives. Higher is better.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{templates, CLASS_COUNT};
use crate::dit::Cond;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveId {
    Brightness,
    Darkness,
    Sharpness,
    HSymmetry,
    TemplateCorr(usize),
    ClassConsistency,
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveId::Brightness => f.write_str("brightness"),
            ObjectiveId::Darkness => f.write_str("darkness"),
            ObjectiveId::Sharpness => f.write_str("sharpness"),
            ObjectiveId::HSymmetry => f.write_str("h_symmetry"),
            ObjectiveId::TemplateCorr(c) => write!(f, "template_corr:{c}"),
            ObjectiveId::ClassConsistency => f.write_str("class_consistency"),
        }
    }
}

impl FromStr for ObjectiveId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = match s {
            "brightness" => ObjectiveId::Brightness,
            "darkness" => ObjectiveId::Darkness,
            "sharpness" => ObjectiveId::Sharpness,
            "h_symmetry" => ObjectiveId::HSymmetry,
            "class_consistency" => ObjectiveId::ClassConsistency,
            _ => match s.strip_prefix("template_corr:").map(str::parse::<usize>) {
                Some(Ok(c)) if c < CLASS_COUNT => ObjectiveId::TemplateCorr(c),
                Some(Ok(c)) => return Err(Error::InvalidClass(c)),
                _ => return Err(Error::InvalidArgument(format!("unknown objective `{s}`"))),
            },
        };
        Ok(id)
    }
}

/// Anything that scores a generated image, optionally using its condition.
pub trait Objective: Sync {
    fn score(&self, img: &Tensor, cond: Cond) -> Result<f64>;
}

impl Objective for ObjectiveId {
    fn score(&self, img: &Tensor, cond: Cond) -> Result<f64> {
        score(*self, img, cond)
    }
}

/// Scores every image the same; handy as a search baseline.
#[derive(Clone, Copy, Debug)]
pub struct ConstantObjective(pub f64);

impl Objective for ConstantObjective {
    fn score(&self, _img: &Tensor, _cond: Cond) -> Result<f64> {
        Ok(self.0)
    }
}

pub fn score(obj: ObjectiveId, img: &Tensor, cond: Cond) -> Result<f64> {
    if img.shape().len() != 2 {
        return Err(Error::Shape(format!("objective on {:?}", img.shape())));
    }
    Ok(match obj {
        ObjectiveId::Brightness => img.mean(),
        ObjectiveId::Darkness => -img.mean(),
        ObjectiveId::Sharpness => sharpness(img),
        ObjectiveId::HSymmetry => -mean_abs_diff(img, &mirror(img)),
        ObjectiveId::TemplateCorr(c) => {
            if c >= CLASS_COUNT {
                return Err(Error::InvalidClass(c));
            }
            pearson(img, &templates()[c])
        }
        ObjectiveId::ClassConsistency => {
            let want = cond.ok_or_else(|| {
                Error::InvalidArgument("class_consistency needs a class condition".into())
            })?;
            if want >= CLASS_COUNT {
                return Err(Error::InvalidClass(want));
            }
            if predicted_class(img) == want {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Class whose template correlates best with `img` (lowest index on ties).
pub fn predicted_class(img: &Tensor) -> usize {
    let t = templates();
    let corr: Vec<f64> = t.iter().map(|t| pearson(img, t)).collect();
    let mut best = 0;
    for c in 1..corr.len() {
        if corr[c] > corr[best] {
            best = c;
        }
    }
    best
}

/// Left-right mirror image.
pub fn mirror(img: &Tensor) -> Tensor {
    let (r, c) = (img.rows(), img.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, img.get(i, c - 1 - j));
        }
    }
    out
}

/// Mean absolute forward difference over all horizontal and vertical
/// neighbour pairs.
pub fn sharpness(img: &Tensor) -> f64 {
    let (r, c) = (img.rows(), img.cols());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..r {
        for j in 0..c {
            if j + 1 < c {
                total += (img.get(i, j + 1) - img.get(i, j)).abs();
                count += 1;
            }
            if i + 1 < r {
                total += (img.get(i + 1, j) - img.get(i, j)).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Pearson correlation of two equally shaped images; 0 when either is
/// constant.
pub fn pearson(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..a.len() {
            sa += a[i];
            sb += b[i];
            saa += a[i] * a[i];
            sbb += b[i] * b[i];
            sab += a[i] * b[i];
        }
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    #[test]
    fn constant_image_scores() {
        let img = Tensor::full(&[16, 16], 0.5);
        assert_eq!(score(ObjectiveId::Brightness, &img, None).unwrap(), 0.5);
        assert_eq!(score(ObjectiveId::Sharpness, &img, None).unwrap(), 0.0);
        assert_eq!(score(ObjectiveId::HSymmetry, &img, None).unwrap(), 0.0);
    }

    #[test]
    fn template_self_correlation() {
        for (c, t) in templates().iter().enumerate() {
            let r = score(ObjectiveId::TemplateCorr(c), t, None).unwrap();
            assert!((r - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pearson_matches_scalar_oracle() {
        let mut rng = Rng::new(31);
        for c in 0..4 {
            let img = Tensor::new(&[16, 16], rng.normals(256)).unwrap();
            let got = score(ObjectiveId::TemplateCorr(c), &img, None).unwrap();
            let expect = naive_pearson(img.data(), templates()[c].data());
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn brightness_and_darkness_cancel() {
        let mut rng = Rng::new(1);
        let img = Tensor::new(&[16, 16], rng.normals(256)).unwrap();
        let b = score(ObjectiveId::Brightness, &img, None).unwrap();
        let d = score(ObjectiveId::Darkness, &img, None).unwrap();
        assert_eq!(b + d, 0.0);
    }

    #[test]
    fn symmetric_templates_have_zero_asymmetry() {
        for t in templates() {
            assert_eq!(score(ObjectiveId::HSymmetry, &t, None).unwrap(), 0.0);
        }
        let mut lopsided = Tensor::zeros(&[16, 16]);
        lopsided.set(3, 0, 1.0);
        assert!(score(ObjectiveId::HSymmetry, &lopsided, None).unwrap() < 0.0);
    }

    #[test]
    fn class_consistency_requires_condition() {
        let t = &templates()[1];
        assert!(score(ObjectiveId::ClassConsistency, t, None).is_err());
        assert_eq!(score(ObjectiveId::ClassConsistency, t, Some(1)).unwrap(), 1.0);
        assert_eq!(score(ObjectiveId::ClassConsistency, t, Some(2)).unwrap(), 0.0);
    }

    #[test]
    fn objective_ids_parse_and_print() {
        for s in [
            "brightness",
            "darkness",
            "sharpness",
            "h_symmetry",
            "template_corr:3",
            "class_consistency",
        ] {
            assert_eq!(s.parse::<ObjectiveId>().unwrap().to_string(), s);
        }
        assert!("template_corr:9".parse::<ObjectiveId>().is_err());
        assert!("pickscore".parse::<ObjectiveId>().is_err());
    }
}
