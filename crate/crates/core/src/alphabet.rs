//! Symbol table mapping characters to dense indices. Index 0 is always the
//! null symbol, which pads transcriptions out to the fixed decode length and
//! never appears in rendered text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const NULL_CHAR: char = '\0';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Alphabet {
    /// Build from the non-null symbols; null is prepended at index 0.
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut list = vec![NULL_CHAR];
        let mut index = BTreeMap::new();
        index.insert(NULL_CHAR, 0usize);
        for c in symbols {
            if c == NULL_CHAR {
                return Err(Error::invalid("alphabet: null is implicit at index 0"));
            }
            if index.insert(c, list.len()).is_some() {
                return Err(Error::invalid(format!("alphabet: duplicate symbol {c:?}")));
            }
            list.push(c);
        }
        if list.len() < 2 {
            return Err(Error::invalid("alphabet: needs at least one real symbol"));
        }
        Ok(Alphabet {
            symbols: list,
            index,
        })
    }

    /// Uppercase letters, space and hyphen: enough for the synthetic signs.
    pub fn desk() -> Self {
        Alphabet::new(('A'..='Z').chain([' ', '-'])).expect("static symbol list")
    }

    /// Printable ASCII plus common accented letters; sized to match the
    /// street-sign benchmark vocabulary of 134 symbols.
    pub fn fsns_scale() -> Self {
        let accented = "àáâãäåæçèéêëìíîïñòóôõöøùúûüÿÀÁÂÃÄÅÆÇÈÉ";
        Alphabet::new((0x20u8..=0x7e).map(char::from).chain(accented.chars()))
            .expect("static symbol list")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.symbols
    }

    pub fn char_at(&self, i: usize) -> Result<char> {
        self.symbols
            .get(i)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                what: "alphabet symbol",
                index: i,
                len: self.symbols.len(),
            })
    }

    pub fn encode_char(&self, c: char) -> Result<usize> {
        self.index
            .get(&c)
            .copied()
            .ok_or_else(|| Error::invalid(format!("alphabet: unknown symbol {c:?}")))
    }

    /// Encode and pad with nulls to exactly `t_steps` indices.
    pub fn encode_padded(&self, text: &str, t_steps: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(t_steps);
        for c in text.chars() {
            out.push(self.encode_char(c)?);
        }
        if out.len() > t_steps {
            return Err(Error::invalid(format!(
                "transcription {:?} longer than {} decode steps",
                text, t_steps
            )));
        }
        out.resize(t_steps, 0);
        Ok(out)
    }

    /// Render indices as text, dropping nulls.
    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &i in indices {
            let c = self.char_at(i)?;
            if c != NULL_CHAR {
                s.push(c);
            }
        }
        Ok(s)
    }

    /// One symbol per line; the null at line 0 is written as an empty line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for &c in &self.symbols {
            if c != NULL_CHAR {
                body.push(c);
            }
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut symbols = Vec::new();
        for (lineno, line) in body.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut chars = line.chars();
            match (lineno, chars.next(), chars.next()) {
                (0, None, _) => {}
                (0, Some(_), _) => {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: 1,
                        msg: "line 0 must be empty (the null symbol)".into(),
                    })
                }
                (_, Some(c), None) => symbols.push(c),
                (_, _, _) => {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: lineno + 1,
                        msg: format!("expected exactly one symbol, got {line:?}"),
                    })
                }
            }
        }
        Alphabet::new(symbols)
    }
}
