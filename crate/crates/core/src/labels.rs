//! Per-pixel region labels and their exact text sidecar format.
//!
//! Sidecar layout: a first line `<width> <height>`, then `height` lines of
//! `width` space-separated decimal labels. Lines end with `\n`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::raster::GrayImage;

pub type Label = u32;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("label file line {line}: {message}")]
pub struct LabelFileError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    /// Panics if `labels.len() != width * height` or a dimension is zero.
    pub fn from_raw(width: usize, height: usize, labels: Vec<Label>) -> Self {
        assert!(width > 0 && height > 0, "label map dimensions must be positive");
        assert_eq!(width * height, labels.len(), "label count mismatch");
        LabelMap {
            width,
            height,
            labels,
        }
    }

    pub fn uniform(width: usize, height: usize, label: Label) -> Self {
        LabelMap::from_raw(width, height, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    /// One past the largest label in use.
    pub fn label_bound(&self) -> Label {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Number of distinct labels present.
    pub fn region_count(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }

    /// Labels are `0..n` with first occurrences in raster order.
    pub fn is_dense_raster_ordered(&self) -> bool {
        let mut next = 0;
        for &l in &self.labels {
            if l == next {
                next += 1;
            } else if l > next {
                return false;
            }
        }
        true
    }

    /// True when every label's pixel set forms a single 4-connected component.
    pub fn is_four_connected(&self) -> bool {
        let mut seen = vec![false; self.labels.len()];
        let mut started = BTreeSet::new();
        let mut queue = VecDeque::new();
        for start in 0..self.labels.len() {
            if seen[start] {
                continue;
            }
            let label = self.labels[start];
            if !started.insert(label) {
                return false;
            }
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for n in neighbors4(i, self.width, self.height) {
                    if !seen[n] && self.labels[n] == label {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        true
    }

    /// Serializes to the sidecar text format.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::with_capacity(self.labels.len() * 3 + 16);
        let _ = writeln!(out, "{} {}", self.width, self.height);
        for row in self.labels.chunks(self.width) {
            let mut first = true;
            for l in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{l}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the sidecar text format.
    pub fn from_sidecar(text: &str) -> Result<LabelMap, LabelFileError> {
        let err = |line: usize, message: String| LabelFileError { line, message };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        let [w, h] = dims[..] else {
            return Err(err(1, format!("expected `<width> <height>`, found {header:?}")));
        };
        let parse_dim = |s: &str| -> Result<usize, LabelFileError> {
            match s.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(err(1, format!("invalid dimension {s:?}"))),
            }
        };
        let (width, height) = (parse_dim(w)?, parse_dim(h)?);
        let total = width
            .checked_mul(height)
            .filter(|&t| t <= text.len())
            .ok_or_else(|| err(1, format!("{width}x{height} does not fit in the file")))?;
        let mut labels = Vec::with_capacity(total);
        for row in 0..height {
            let line_no = row + 2;
            let line = lines
                .next()
                .ok_or_else(|| err(line_no, format!("missing row {row}")))?;
            let before = labels.len();
            for tok in line.split_whitespace() {
                let l = tok
                    .parse::<Label>()
                    .map_err(|_| err(line_no, format!("invalid label {tok:?}")))?;
                labels.push(l);
            }
            if labels.len() - before != width {
                return Err(err(
                    line_no,
                    format!("expected {width} labels, found {}", labels.len() - before),
                ));
            }
        }
        if let Some((i, extra)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
            return Err(err(
                height + 2 + i,
                format!("unexpected trailing content {extra:?}"),
            ));
        }
        Ok(LabelMap {
            width,
            height,
            labels,
        })
    }

    /// Grayscale rendering for eyeballing: labels spread linearly over [0, 255].
    pub fn to_visual(&self) -> GrayImage {
        let max = self.labels.iter().copied().max().unwrap_or(0).max(1) as f64;
        let data = self
            .labels
            .iter()
            .map(|&l| (l as f64 * 255.0 / max).round())
            .collect();
        GrayImage::from_raw_unchecked(self.width, self.height, data)
    }
}

/// 4-neighbor indices of `i` in a `width`×`height` grid, in the order
/// up, left, right, down.
pub(crate) fn neighbors4(i: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % width, i / width);
    let up = (y > 0).then(|| i - width);
    let left = (x > 0).then(|| i - 1);
    let right = (x + 1 < width).then(|| i + 1);
    let down = (y + 1 < height).then(|| i + width);
    [up, left, right, down].into_iter().flatten()
}
