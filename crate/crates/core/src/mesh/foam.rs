//! Tokenizer and readers for OpenFOAM ASCII dictionary files.
//!
//! Only the subset needed for `constant/polyMesh` and `0/<field>` files is
//! supported: the `FoamFile` header, counted lists (`N ( ... )` and the
//! uniform `N{v}` shorthand), nested dictionaries and `uniform`/`nonuniform`
//! field values.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    Str(String),
    Punct(char),
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: usize,
}

pub(crate) fn tokenize(src: &str, file: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    let mut line = 1;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            '\n' => {
                line += 1;
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            '/' if i + 1 < bytes.len() && bytes[i + 1] == b'/' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            '/' if i + 1 < bytes.len() && bytes[i + 1] == b'*' => {
                let start = line;
                i += 2;
                loop {
                    if i + 1 >= bytes.len() {
                        return Err(Error::Parse {
                            file: file.into(),
                            line: start,
                            msg: "unterminated block comment".into(),
                        });
                    }
                    if bytes[i] == b'\n' {
                        line += 1;
                    }
                    if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                        i += 2;
                        break;
                    }
                    i += 1;
                }
            }
            '(' | ')' | '{' | '}' | '[' | ']' | ';' => {
                out.push(Token {
                    tok: Tok::Punct(c),
                    line,
                });
                i += 1;
            }
            '"' => {
                let start = line;
                i += 1;
                let s0 = i;
                while i < bytes.len() && bytes[i] != b'"' {
                    if bytes[i] == b'\n' {
                        line += 1;
                    }
                    i += 1;
                }
                if i >= bytes.len() {
                    return Err(Error::Parse {
                        file: file.into(),
                        line: start,
                        msg: "unterminated string".into(),
                    });
                }
                out.push(Token {
                    tok: Tok::Str(src[s0..i].to_string()),
                    line: start,
                });
                i += 1;
            }
            _ => {
                let s0 = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_whitespace() || "(){}[];\"".contains(d) {
                        break;
                    }
                    if d == '/' && i + 1 < bytes.len() && (bytes[i + 1] == b'/' || bytes[i + 1] == b'*') {
                        break;
                    }
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Word(src[s0..i].to_string()),
                    line,
                });
            }
        }
    }
    Ok(out)
}

/// Cursor over a token vector with positioned error reporting.
pub(crate) struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    file: String,
}

impl<'a> Cursor<'a> {
    pub fn new(toks: &'a [Token], file: &str) -> Self {
        Self {
            toks,
            pos: 0,
            file: file.to_string(),
        }
    }

    pub fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|t| t.line)
            .unwrap_or(1)
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            line: self.line(),
            msg: msg.into(),
        }
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    pub fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    pub fn next(&mut self) -> Result<&Tok> {
        let t = self
            .toks
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(&t.tok)
    }

    pub fn expect(&mut self, c: char) -> Result<()> {
        match self.next()? {
            Tok::Punct(p) if *p == c => Ok(()),
            other => {
                let other = other.clone();
                self.pos -= 1;
                Err(self.err(format!("expected '{c}', found {other:?}")))
            }
        }
    }

    pub fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub fn word(&mut self) -> Result<String> {
        match self.next()? {
            Tok::Word(w) => Ok(w.clone()),
            Tok::Str(s) => Ok(s.clone()),
            other => {
                let other = other.clone();
                self.pos -= 1;
                Err(self.err(format!("expected a word, found {other:?}")))
            }
        }
    }

    pub fn number(&mut self) -> Result<f64> {
        let w = self.word()?;
        w.parse::<f64>().map_err(|_| {
            self.pos -= 1;
            self.err(format!("expected a number, found '{w}'"))
        })
    }

    pub fn label(&mut self) -> Result<usize> {
        let w = self.word()?;
        w.parse::<usize>().map_err(|_| {
            self.pos -= 1;
            self.err(format!("expected a non-negative integer, found '{w}'"))
        })
    }

    /// Skip one value (word, string, list or dictionary) up to and including
    /// a terminating `;` if present.
    pub fn skip_entry_value(&mut self) -> Result<()> {
        loop {
            match self.peek() {
                None => return Err(self.err("unexpected end of file in entry")),
                Some(Tok::Punct(';')) => {
                    self.pos += 1;
                    return Ok(());
                }
                Some(Tok::Punct('{')) => {
                    self.skip_balanced('{', '}')?;
                    return Ok(());
                }
                Some(Tok::Punct('(')) => self.skip_balanced('(', ')')?,
                Some(Tok::Punct('[')) => self.skip_balanced('[', ']')?,
                Some(_) => self.pos += 1,
            }
        }
    }

    fn skip_balanced(&mut self, open: char, close: char) -> Result<()> {
        self.expect(open)?;
        let mut depth = 1usize;
        while depth > 0 {
            match self.next()? {
                Tok::Punct(c) if *c == open => depth += 1,
                Tok::Punct(c) if *c == close => depth -= 1,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Parse the mandatory `FoamFile { ... }` header into key/value text.
pub(crate) fn parse_header(cur: &mut Cursor<'_>) -> Result<BTreeMap<String, String>> {
    match cur.peek() {
        Some(Tok::Word(w)) if w == "FoamFile" => {
            cur.next()?;
        }
        _ => return Err(cur.err("missing FoamFile header")),
    }
    cur.expect('{')?;
    let mut map = BTreeMap::new();
    loop {
        if cur.eat('}') {
            break;
        }
        let key = cur.word()?;
        let mut val = String::new();
        loop {
            match cur.next()? {
                Tok::Punct(';') => break,
                Tok::Word(w) | Tok::Str(w) => {
                    if !val.is_empty() {
                        val.push(' ');
                    }
                    val.push_str(w);
                }
                Tok::Punct('}') => return Err(cur.err(format!("header entry '{key}' missing ';'"))),
                Tok::Punct(c) => {
                    let c = *c;
                    return Err(cur.err(format!("unexpected '{c}' in header entry '{key}'")));
                }
            }
        }
        map.insert(key, val);
    }
    if map.get("format").is_some_and(|f| f != "ascii") {
        return Err(cur.err("only ASCII format is supported"));
    }
    Ok(map)
}

/// Read a counted list. Supports `N ( item ... )` and `N{item}`.
pub(crate) fn counted_list<T>(
    cur: &mut Cursor<'_>,
    mut item: impl FnMut(&mut Cursor<'_>) -> Result<T>,
) -> Result<Vec<T>>
where
    T: Clone,
{
    let declared = cur.label()?;
    if cur.eat('{') {
        let v = item(cur)?;
        cur.expect('}')?;
        return Ok(vec![v; declared]);
    }
    cur.expect('(')?;
    let mut out = Vec::with_capacity(declared);
    while !cur.eat(')') {
        if cur.at_end() {
            return Err(cur.err("unterminated list"));
        }
        out.push(item(cur)?);
    }
    if out.len() != declared {
        return Err(Error::Structure(format!(
            "{}: list declares {} entries but contains {}",
            cur.file,
            declared,
            out.len()
        )));
    }
    Ok(out)
}

pub(crate) fn vector3(cur: &mut Cursor<'_>) -> Result<[f64; 3]> {
    cur.expect('(')?;
    let v = [cur.number()?, cur.number()?, cur.number()?];
    cur.expect(')')?;
    Ok(v)
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn file_label(path: &Path) -> String {
    path.display().to_string()
}

/// Standard header block for files written by this crate.
pub(crate) fn header(class: &str, location: &str, object: &str, note: Option<&str>) -> String {
    let mut s = String::new();
    s.push_str("FoamFile\n{\n    version     2.0;\n    format      ascii;\n");
    let _ = writeln!(s, "    class       {class};");
    if let Some(n) = note {
        let _ = writeln!(s, "    note        \"{n}\";");
    }
    let _ = writeln!(s, "    location    \"{location}\";");
    let _ = writeln!(s, "    object      {object};");
    s.push_str("}\n\n");
    s
}

/// A parsed dictionary entry tree, sufficient for field files.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Entry {
    Dict(Vec<(String, Entry)>),
    Tokens(Vec<Tok>),
}

impl Entry {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        match self {
            Entry::Dict(items) => items.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            Entry::Tokens(_) => None,
        }
    }
}

/// Parse `key value;` and `key { ... }` entries until `}` or end of input.
pub(crate) fn parse_dict_body(cur: &mut Cursor<'_>, nested: bool) -> Result<Vec<(String, Entry)>> {
    let mut items = Vec::new();
    loop {
        if nested && cur.eat('}') {
            return Ok(items);
        }
        if cur.at_end() {
            if nested {
                return Err(cur.err("unterminated dictionary"));
            }
            return Ok(items);
        }
        let key = cur.word()?;
        if cur.eat('{') {
            let body = parse_dict_body(cur, true)?;
            items.push((key, Entry::Dict(body)));
            continue;
        }
        let mut toks = Vec::new();
        let mut depth = 0i32;
        loop {
            let t = cur.next()?.clone();
            match t {
                Tok::Punct(';') if depth == 0 => break,
                Tok::Punct('(') | Tok::Punct('[') | Tok::Punct('{') => depth += 1,
                Tok::Punct(')') | Tok::Punct(']') | Tok::Punct('}') => depth -= 1,
                _ => {}
            }
            if depth < 0 {
                return Err(cur.err(format!("unbalanced bracket in entry '{key}'")));
            }
            toks.push(t);
        }
        items.push((key, Entry::Tokens(toks)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_comments_and_punct() {
        let toks = tokenize("a /* x\n y */ b // c\n(1 2);", "t").unwrap();
        let words: Vec<_> = toks.iter().map(|t| t.tok.clone()).collect();
        assert_eq!(
            words,
            vec![
                Tok::Word("a".into()),
                Tok::Word("b".into()),
                Tok::Punct('('),
                Tok::Word("1".into()),
                Tok::Word("2".into()),
                Tok::Punct(')'),
                Tok::Punct(';'),
            ]
        );
        assert_eq!(toks[2].line, 3);
    }

    #[test]
    fn header_without_semicolon_reports_line() {
        let src = "FoamFile\n{\n version 2.0;\n format ascii\n}\n";
        let toks = tokenize(src, "h").unwrap();
        let mut cur = Cursor::new(&toks, "h");
        match parse_header(&mut cur) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_list_shorthand() {
        let toks = tokenize("3{7}", "l").unwrap();
        let mut cur = Cursor::new(&toks, "l");
        assert_eq!(counted_list(&mut cur, |c| c.label()).unwrap(), vec![7, 7, 7]);
    }

    #[test]
    fn count_mismatch_is_structural() {
        let toks = tokenize("3 (1 2)", "l").unwrap();
        let mut cur = Cursor::new(&toks, "l");
        assert!(matches!(
            counted_list(&mut cur, |c| c.label()),
            Err(Error::Structure(_))
        ));
    }
}
