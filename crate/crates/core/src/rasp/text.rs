//! Canonical program text.
//!
//! ```text
//! var1 = Select(tokens, tokens, EQ)
//! var2 = SelectorWidth(var1)
//! output = var2
//! ```
//!
//! The grammar is given in `docs/grammar.md`. Blank lines are ignored.

use std::fmt::Write as _;

use thiserror::Error;

use super::lambda::{BinaryFn, Predicate, UnaryFn};
use super::program::{Function, Node, Program, Ref, TypeError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    /// 1-based.
    pub line: usize,
    /// 1-based, in characters.
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

pub fn render(p: &Program) -> String {
    let mut s = String::new();
    for (i, node) in p.nodes().iter().enumerate() {
        let body = match *node {
            Node::Select { keys, queries, predicate } => format!("{keys}, {queries}, {}", predicate.name()),
            Node::Aggregate { selector, sop } => format!("{selector}, {sop}"),
            Node::SelectorWidth { selector } => format!("{selector}"),
            Node::Map { f, sop } => format!("{}, {sop}", f.source()),
            Node::SequenceMap { f, lhs, rhs } => format!("{}, {lhs}, {rhs}", f.source()),
        };
        writeln!(s, "{} = {}({body})", Ref::Node(i), node.function().name()).unwrap();
    }
    writeln!(s, "output = {}", p.output()).unwrap();
    s
}

pub fn parse(text: &str) -> Result<Program, TextError> {
    let mut nodes = Vec::new();
    let mut output = None;
    for (lineno, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let mut c = Cursor { s: raw, pos: 0, line: lineno + 1 };
        if output.is_some() {
            return Err(c.error("text after the output line").into());
        }
        c.skip_ws();
        let name = c.ident();
        c.expect("=")?;
        if name == "output" {
            output = Some(c.reference()?);
            c.end()?;
            continue;
        }
        let expected = format!("var{}", nodes.len() + 1);
        if name != expected {
            return Err(c.error_at(0, &format!("expected `{expected}` or `output`")).into());
        }
        nodes.push(c.node()?);
        c.end()?;
    }
    let Some(output) = output else {
        let line = text.lines().count().max(1);
        return Err(ParseError { line, column: 1, message: "missing `output = ...` line".into() }.into());
    };
    Ok(Program::with_output(nodes, output)?)
}

struct Cursor<'a> {
    s: &'a str,
    /// Byte offset into `s`.
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.s.len() - trimmed.len();
    }

    fn error_at(&self, pos: usize, message: &str) -> ParseError {
        ParseError { line: self.line, column: self.s[..pos].chars().count() + 1, message: message.to_string() }
    }

    fn error(&self, message: &str) -> ParseError {
        self.error_at(self.pos, message)
    }

    fn ident(&mut self) -> &'a str {
        self.skip_ws();
        let rest = self.rest();
        let n = rest.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(rest.len());
        self.pos += n;
        &rest[..n]
    }

    fn expect(&mut self, tok: &str) -> Result<(), ParseError> {
        self.skip_ws();
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            Ok(())
        } else {
            Err(self.error(&format!("expected `{tok}`")))
        }
    }

    fn end(&mut self) -> Result<(), ParseError> {
        self.skip_ws();
        if self.rest().is_empty() {
            Ok(())
        } else {
            Err(self.error("unexpected trailing text"))
        }
    }

    fn reference(&mut self) -> Result<Ref, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let name = self.ident();
        match name {
            "tokens" => Ok(Ref::Tokens),
            "indices" => Ok(Ref::Indices),
            _ => name
                .strip_prefix("var")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1 && !name.starts_with("var0"))
                .map(|n| Ref::Node(n - 1))
                .ok_or_else(|| self.error_at(start, "expected `tokens`, `indices` or `varN`")),
        }
    }

    fn predicate(&mut self) -> Result<Predicate, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let name = self.ident();
        Predicate::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| self.error_at(start, "unknown predicate"))
    }

    /// Longest library entry whose source text starts here and is followed
    /// by a comma.
    fn lambda<T: Copy>(&mut self, library: &[T], source: impl Fn(T) -> &'static str) -> Result<T, ParseError> {
        self.skip_ws();
        let rest = self.rest();
        let hit = library
            .iter()
            .copied()
            .filter(|&f| rest.starts_with(source(f)) && rest[source(f).len()..].trim_start().starts_with(','))
            .max_by_key(|&f| source(f).len());
        match hit {
            Some(f) => {
                self.pos += source(f).len();
                Ok(f)
            }
            None => Err(self.error("unknown lambda")),
        }
    }

    fn node(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let name = self.ident();
        let function = Function::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| self.error_at(start, "unknown function"))?;
        self.expect("(")?;
        let node = match function {
            Function::Select => {
                let keys = self.reference()?;
                self.expect(",")?;
                let queries = self.reference()?;
                self.expect(",")?;
                Node::Select { keys, queries, predicate: self.predicate()? }
            }
            Function::Aggregate => {
                let selector = self.reference()?;
                self.expect(",")?;
                Node::Aggregate { selector, sop: self.reference()? }
            }
            Function::SelectorWidth => Node::SelectorWidth { selector: self.reference()? },
            Function::Map => {
                let f = self.lambda(&UnaryFn::ALL, UnaryFn::source)?;
                self.expect(",")?;
                Node::Map { f, sop: self.reference()? }
            }
            Function::SequenceMap => {
                let f = self.lambda(&BinaryFn::ALL, BinaryFn::source)?;
                self.expect(",")?;
                let lhs = self.reference()?;
                self.expect(",")?;
                Node::SequenceMap { f, lhs, rhs: self.reference()? }
            }
        };
        self.expect(")")?;
        Ok(node)
    }
}
