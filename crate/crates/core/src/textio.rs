//! Token-line helpers shared by the GAMM and GAMQ text formats.

use std::fmt::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) struct Line<'a> {
    pub number: usize,
    pub tokens: Vec<&'a str>,
}

impl<'a> Line<'a> {
    pub fn keyword(&self) -> &'a str {
        self.tokens[0]
    }

    pub fn expect_len(&self, len: usize) -> Result<()> {
        if self.tokens.len() != len {
            return Err(Error::parse(
                self.number,
                format!(
                    "{} expects {} fields, found {}",
                    self.keyword(),
                    len - 1,
                    self.tokens.len() - 1
                ),
            ));
        }
        Ok(())
    }

    pub fn f64(&self, index: usize) -> Result<f64> {
        let token = self.token(index)?;
        let value: f64 = token
            .parse()
            .map_err(|_| Error::parse(self.number, format!("invalid number '{token}'")))?;
        if !value.is_finite() {
            return Err(Error::parse(
                self.number,
                format!("non-finite number '{token}'"),
            ));
        }
        Ok(value)
    }

    pub fn int<T: FromStr>(&self, index: usize) -> Result<T> {
        let token = self.token(index)?;
        token
            .parse()
            .map_err(|_| Error::parse(self.number, format!("invalid integer '{token}'")))
    }

    pub fn f64_run(&self, start: usize, count: usize) -> Result<Vec<f64>> {
        (start..start + count).map(|i| self.f64(i)).collect()
    }

    fn token(&self, index: usize) -> Result<&'a str> {
        self.tokens
            .get(index)
            .copied()
            .ok_or_else(|| Error::parse(self.number, "missing field"))
    }
}

/// Splits text into non-empty whitespace-tokenized lines with `#` comments removed.
pub(crate) fn lines(text: &str) -> impl Iterator<Item = Line<'_>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        (!tokens.is_empty()).then_some(Line {
            number: i + 1,
            tokens,
        })
    })
}

/// Appends a float with 17 significant digits; NaN and infinities are rejected.
pub(crate) fn push_f64(out: &mut String, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Serialization(format!(
            "non-finite value {value} cannot be persisted"
        )));
    }
    write!(out, " {value:.16e}").expect("writing to String cannot fail");
    Ok(())
}

pub(crate) fn push_f64s(out: &mut String, values: &[f64]) -> Result<()> {
    values.iter().try_for_each(|&v| push_f64(out, v))
}
