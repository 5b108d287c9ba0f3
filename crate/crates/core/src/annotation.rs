//! Ground-truth records and their text file format.
//!
//! One record per line, whitespace separated:
//!
//! ```text
//! image_id x_min y_min width height occlusion_fraction mask
//! ```
//!
//! `mask` is the K×K part-visibility grid written row-major as `0`/`1`
//! characters (`1` = visible). Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Real;

/// K×K visibility of the part cells of an instance, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    k: usize,
    cells: Vec<bool>,
}

impl VisibilityMask {
    pub fn all_visible(k: usize) -> Self {
        VisibilityMask {
            k,
            cells: vec![true; k * k],
        }
    }

    pub fn from_cells(k: usize, cells: Vec<bool>) -> Result<Self> {
        if k == 0 || cells.len() != k * k {
            return Err(Error::Invalid(format!(
                "visibility mask needs {} cells for K={k}, got {}",
                k * k,
                cells.len()
            )));
        }
        Ok(VisibilityMask { k, cells })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn visible(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.k + col]
    }

    pub fn visible_count(&self) -> usize {
        self.cells.iter().filter(|&&v| v).count()
    }

    fn encode(&self) -> String {
        self.cells.iter().map(|&v| if v { '1' } else { '0' }).collect()
    }

    fn decode(s: &str) -> Result<Self> {
        let cells: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Invalid(format!("mask character `{other}`"))),
            })
            .collect::<Result<_>>()?;
        let k = (cells.len() as f64).sqrt().round() as usize;
        Self::from_cells(k, cells)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub image_id: usize,
    pub bbox: BBox,
    /// Fraction of the instance's pixels hidden by occluders, in `[0, 1]`.
    pub occlusion_fraction: Real,
    pub visibility: VisibilityMask,
}

pub fn format_annotations(anns: &[Annotation]) -> String {
    let mut out = String::from("# image_id x_min y_min width height occlusion_fraction mask\n");
    for a in anns {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            a.image_id,
            a.bbox.x_min,
            a.bbox.y_min,
            a.bbox.width,
            a.bbox.height,
            a.occlusion_fraction,
            a.visibility.encode()
        );
    }
    out
}

pub fn parse_annotations(text: &str, origin: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<Real>().map_err(|e| err(format!("`{s}`: {e}")));
        let image_id = f[0].parse::<usize>().map_err(|e| err(format!("image id: {e}")))?;
        let bbox = BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?).map_err(|e| err(e.to_string()))?;
        let occlusion_fraction = num(f[5])?;
        if !(0.0..=1.0).contains(&occlusion_fraction) {
            return Err(err(format!("occlusion fraction {occlusion_fraction} outside [0, 1]")));
        }
        let visibility = VisibilityMask::decode(f[6]).map_err(|e| err(e.to_string()))?;
        out.push(Annotation {
            image_id,
            bbox,
            occlusion_fraction,
            visibility,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    std::fs::write(path, format_annotations(anns)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string())
}
