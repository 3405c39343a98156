//! Temporal masks: per-frame, per-class binary masking decisions.
//!
//! A mask is an `l × p` matrix stored row-major (rows are frames, columns are
//! classes). `true` means the features of that class are removed in that frame.
//!
//! The canonical on-disk form is a CSV file with header `frame,<class_1>,…`
//! followed by one `t,0/1,…` row per frame, LF line endings.

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("a temporal mask needs at least one class")]
    NoClasses,
    #[error("invalid class name {0:?}")]
    InvalidClassName(String),
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("column {column} has {got} entries, expected {expected}")]
    ColumnLength {
        column: usize,
        expected: usize,
        got: usize,
    },
    #[error("mask CSV line {line}: {message}")]
    Csv { line: usize, message: String },
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TemporalMask {
    class_names: Vec<String>,
    frames: usize,
    decisions: Vec<bool>,
}

pub(crate) fn check_class_names(class_names: &[String]) -> Result<(), MaskError> {
    if class_names.is_empty() {
        return Err(MaskError::NoClasses);
    }
    for (i, name) in class_names.iter().enumerate() {
        if name.is_empty()
            || name == "frame"
            || name.contains([',', '\n', '\r'])
            || name.trim() != name
        {
            return Err(MaskError::InvalidClassName(name.clone()));
        }
        if class_names[..i].contains(name) {
            return Err(MaskError::DuplicateClass(name.clone()));
        }
    }
    Ok(())
}

impl TemporalMask {
    /// All-zeros mask (nothing masked).
    pub fn zeros(class_names: Vec<String>, frames: usize) -> Result<Self, MaskError> {
        Self::filled(class_names, frames, false)
    }

    /// All-ones mask (every class masked in every frame).
    pub fn ones(class_names: Vec<String>, frames: usize) -> Result<Self, MaskError> {
        Self::filled(class_names, frames, true)
    }

    fn filled(class_names: Vec<String>, frames: usize, value: bool) -> Result<Self, MaskError> {
        check_class_names(&class_names)?;
        let decisions = vec![value; frames * class_names.len()];
        Ok(Self {
            class_names,
            frames,
            decisions,
        })
    }

    /// Builds a mask from one decision vector per class.
    pub fn from_columns(class_names: Vec<String>, columns: &[Vec<bool>]) -> Result<Self, MaskError> {
        check_class_names(&class_names)?;
        if columns.len() != class_names.len() {
            return Err(MaskError::ColumnLength {
                column: columns.len(),
                expected: class_names.len(),
                got: columns.len(),
            });
        }
        let frames = columns[0].len();
        for (c, col) in columns.iter().enumerate() {
            if col.len() != frames {
                return Err(MaskError::ColumnLength {
                    column: c,
                    expected: frames,
                    got: col.len(),
                });
            }
        }
        let p = class_names.len();
        let mut decisions = vec![false; frames * p];
        for (c, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                decisions[t * p + c] = v;
            }
        }
        Ok(Self {
            class_names,
            frames,
            decisions,
        })
    }

    /// Single-class mask from a string of `0`/`1` characters.
    pub fn from_bits(class_name: &str, bits: &str) -> Result<Self, MaskError> {
        let column = parse_bits(bits).ok_or_else(|| MaskError::Csv {
            line: 0,
            message: format!("not a 0/1 string: {bits:?}"),
        })?;
        Self::from_columns(vec![class_name.to_owned()], &[column])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, frame: usize, class: usize) -> bool {
        self.decisions[frame * self.classes() + class]
    }

    pub fn set(&mut self, frame: usize, class: usize, value: bool) {
        let p = self.classes();
        self.decisions[frame * p + class] = value;
    }

    pub fn column(&self, class: usize) -> Vec<bool> {
        (0..self.frames).map(|t| self.get(t, class)).collect()
    }

    pub fn set_column(&mut self, class: usize, column: &[bool]) {
        assert_eq!(column.len(), self.frames, "column length mismatch");
        for (t, &v) in column.iter().enumerate() {
            self.set(t, class, v);
        }
    }

    /// Column rendered as a `0`/`1` string.
    pub fn column_bits(&self, class: usize) -> String {
        (0..self.frames)
            .map(|t| if self.get(t, class) { '1' } else { '0' })
            .collect()
    }

    /// Row-major decisions.
    pub fn decisions(&self) -> &[bool] {
        &self.decisions
    }

    /// Number of masked entries.
    pub fn masked_count(&self) -> usize {
        self.decisions.iter().filter(|&&v| v).count()
    }

    pub fn to_csv(&self) -> String {
        let p = self.classes();
        let mut out = String::with_capacity(8 + self.frames * (6 + 2 * p));
        out.push_str("frame");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for t in 0..self.frames {
            out.push_str(&t.to_string());
            for c in 0..p {
                out.push(',');
                out.push(if self.get(t, c) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MaskError> {
        let csv_err = |line: usize, message: String| MaskError::Csv { line, message };
        let mut lines = text.split('\n').enumerate().filter(|(_, l)| !l.is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| csv_err(1, "empty file".into()))?;
        let mut fields = header.split(',');
        if fields.next() != Some("frame") {
            return Err(csv_err(1, "header must start with `frame`".into()));
        }
        let class_names: Vec<String> = fields.map(str::to_owned).collect();
        check_class_names(&class_names)?;
        let p = class_names.len();
        let mut decisions = Vec::new();
        let mut frames = 0usize;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let mut fields = line.split(',');
            let frame: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| csv_err(lineno, "bad frame index".into()))?;
            if frame != frames {
                return Err(csv_err(
                    lineno,
                    format!("expected frame {frames}, found {frame}"),
                ));
            }
            let mut count = 0;
            for field in fields {
                decisions.push(match field {
                    "0" => false,
                    "1" => true,
                    other => return Err(csv_err(lineno, format!("expected 0 or 1, found {other:?}"))),
                });
                count += 1;
            }
            if count != p {
                return Err(csv_err(lineno, format!("expected {p} values, found {count}")));
            }
            frames += 1;
        }
        Ok(Self {
            class_names,
            frames,
            decisions,
        })
    }

    /// SHA-256 of the canonical CSV serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

impl fmt::Debug for TemporalMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("TemporalMask");
        for (c, name) in self.class_names.iter().enumerate() {
            s.field(name, &self.column_bits(c));
        }
        s.finish()
    }
}

pub(crate) fn parse_bits(bits: &str) -> Option<Vec<bool>> {
    bits.chars()
        .map(|ch| match ch {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(ns: &[&str]) -> Vec<String> {
        ns.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn csv_layout() {
        let mask = TemporalMask::from_columns(
            names(&["person", "car"]),
            &[vec![false, true, true], vec![true, false, false]],
        )
        .unwrap();
        assert_eq!(mask.to_csv(), "frame,person,car\n0,0,1\n1,1,0\n2,1,0\n");
        assert_eq!(TemporalMask::from_csv(&mask.to_csv()).unwrap(), mask);
        assert_eq!(mask.masked_count(), 3);
        assert_eq!(mask.column_bits(0), "011");
    }

    #[test]
    fn rejects_bad_class_names() {
        assert_eq!(
            TemporalMask::zeros(vec![], 3).unwrap_err(),
            MaskError::NoClasses
        );
        assert!(matches!(
            TemporalMask::zeros(names(&["a", "a"]), 3),
            Err(MaskError::DuplicateClass(_))
        ));
        assert!(matches!(
            TemporalMask::zeros(names(&["a,b"]), 3),
            Err(MaskError::InvalidClassName(_))
        ));
        assert!(matches!(
            TemporalMask::zeros(names(&[""]), 3),
            Err(MaskError::InvalidClassName(_))
        ));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = TemporalMask::from_csv("frame,a\n0,0\n1,2\n").unwrap_err();
        assert_eq!(
            err,
            MaskError::Csv {
                line: 3,
                message: "expected 0 or 1, found \"2\"".into()
            }
        );
        assert!(matches!(
            TemporalMask::from_csv("frame,a\n0,0\n2,1\n"),
            Err(MaskError::Csv { line: 3, .. })
        ));
        assert!(matches!(
            TemporalMask::from_csv("frame,a,b\n0,0\n"),
            Err(MaskError::Csv { line: 2, .. })
        ));
        assert!(matches!(
            TemporalMask::from_csv("t,a\n"),
            Err(MaskError::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn digest_tracks_content() {
        let a = TemporalMask::from_bits("x", "0011100").unwrap();
        let b = TemporalMask::from_bits("x", "0011100").unwrap();
        let c = TemporalMask::from_bits("x", "0011000").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
