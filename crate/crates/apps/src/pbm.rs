//! Plain (P1) portable bitmap patterns for the game of life.

use thiserror::Error;

use crate::rng::{seed_for, unit};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PbmError {
    #[error("expected magic number P1, found {0:?}")]
    BadMagic(String),
    #[error("bad dimension {0:?}")]
    BadDimension(String),
    #[error("expected {expected} pixels, found {found}")]
    TooFewPixels { expected: usize, found: usize },
    #[error("unexpected character {0:?} in pixel data")]
    BadPixel(char),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub width: usize,
    pub height: usize,
    /// Row-major, `true` is alive.
    pub cells: Vec<bool>,
}

impl Pattern {
    pub fn empty(width: usize, height: usize) -> Pattern {
        Pattern { width, height, cells: vec![false; width * height] }
    }

    /// Each cell is alive with probability `density`.
    pub fn random(width: usize, height: usize, density: f64, seed: u64) -> Pattern {
        let cells = (0..width * height).map(|i| unit(seed_for(seed, 0x9b, i as u64)) < density).collect();
        Pattern { width, height, cells }
    }

    /// Builds a pattern from rows of '.' (dead) and any other char (alive).
    pub fn from_rows(rows: &[&str]) -> Pattern {
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut p = Pattern::empty(width, rows.len());
        for (y, r) in rows.iter().enumerate() {
            for (x, c) in r.chars().enumerate() {
                p.cells[y * width + x] = c != '.';
            }
        }
        p
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, alive: bool) {
        self.cells[y * self.width + x] = alive;
    }

    /// Copies `self` into a larger pattern at offset (x, y). Cells that
    /// fall outside are dropped.
    pub fn placed(&self, width: usize, height: usize, x: usize, y: usize) -> Pattern {
        let mut out = Pattern::empty(width, height);
        for sy in 0..self.height {
            for sx in 0..self.width {
                if sx + x < width && sy + y < height {
                    out.set(sx + x, sy + y, self.get(sx, sy));
                }
            }
        }
        out
    }

    pub fn alive(&self) -> Vec<(usize, usize)> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).map(|i| (i % self.width, i / self.width)).collect()
    }

    pub fn parse(text: &str) -> Result<Pattern, PbmError> {
        // Comments run from '#' to end of line.
        let clean: String = text.lines().map(|l| l.split('#').next().unwrap_or("")).collect::<Vec<_>>().join("\n");
        let mut tokens = clean.split_whitespace();
        let magic = tokens.next().unwrap_or("");
        if magic != "P1" {
            return Err(PbmError::BadMagic(magic.to_string()));
        }
        let mut dim = || -> Result<usize, PbmError> {
            let t = tokens.next().unwrap_or("");
            t.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| PbmError::BadDimension(t.to_string()))
        };
        let (width, height) = (dim()?, dim()?);
        let expected = width * height;
        let mut cells = Vec::with_capacity(expected);
        // Pixels may be packed without separators.
        for c in tokens.flat_map(str::chars) {
            match c {
                '0' => cells.push(false),
                '1' => cells.push(true),
                c => return Err(PbmError::BadPixel(c)),
            }
            if cells.len() == expected {
                break;
            }
        }
        if cells.len() < expected {
            return Err(PbmError::TooFewPixels { expected, found: cells.len() });
        }
        Ok(Pattern { width, height, cells })
    }

    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.width, self.height);
        for row in self.cells.chunks(self.width) {
            let line: Vec<&str> = row.iter().map(|&a| if a { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}
