//! Mask files: UTF-8 lines `index score`, ascending by index, one line per flagged point.
//!
//! Unflagged points are not listed, so a mask read back carries score 0 for them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{io_err, Mask3D, SceneError};

pub fn write_mask(mask: &Mask3D, path: &Path) -> Result<(), SceneError> {
    let mut out = String::new();
    for i in mask.indices() {
        writeln!(out, "{i} {}", mask.score(i)).unwrap();
    }
    fs::write(path, out).map_err(io_err(path))
}

/// `(index, score)` entries of a mask file, validated except for the upper index bound.
pub fn read_mask_entries(path: &Path) -> Result<Vec<(usize, f64)>, SceneError> {
    parse_entries(path, usize::MAX)
}

/// Reads a mask for a cloud of `len` points.
pub fn read_mask(path: &Path, len: usize) -> Result<Mask3D, SceneError> {
    let mut flags = vec![false; len];
    let mut scores = vec![0.0; len];
    for (idx, score) in parse_entries(path, len)? {
        flags[idx] = true;
        scores[idx] = score;
    }
    Mask3D::new(flags, Some(scores))
}

fn parse_entries(path: &Path, len: usize) -> Result<Vec<(usize, f64)>, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, reason: String| SceneError::MalformedMask { path: path.to_path_buf(), line, reason };
    let mut out = Vec::new();
    let mut last: Option<usize> = None;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(idx), Some(score), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(lineno, "expected `index score`".into()));
        };
        let idx: usize = idx.parse().map_err(|_| bad(lineno, format!("bad index {idx:?}")))?;
        let score: f64 = score.parse().map_err(|_| bad(lineno, format!("bad score {score:?}")))?;
        if idx >= len {
            return Err(bad(lineno, format!("index {idx} out of range for {len} points")));
        }
        if last.is_some_and(|l| idx <= l) {
            return Err(bad(lineno, "indices must be strictly ascending".into()));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(bad(lineno, format!("score {score} outside [0,1]")));
        }
        last = Some(idx);
        out.push((idx, score));
    }
    Ok(out)
}
