//! The supported SQL dialect: select-project-join-aggregate queries whose
//! expressions may call the registered classifier through `PREDICT(rel)`.
//!
//! ```text
//! query  := SELECT select ("," select)* FROM source ("," source)*
//!           [WHERE pred] [GROUP BY expr ("," expr)*]
//! source := ident [[AS] ident]
//! select := "*" | COUNT(*) | (SUM|AVG) "(" expr ")" | expr
//! expr   := term (("+"|"-") term)*
//! term   := atom ("*" atom)*
//! atom   := ident["." ident] | number | PREDICT "(" (ident|"*") ")"
//!         | POWER "(" expr "," expr ")" | "(" expr ")" | "-" atom
//! pred   := conj (OR conj)* ; conj := neg (AND neg)*
//! neg    := NOT neg | "(" pred ")" | ident LIKE string | expr cmp expr
//! ```

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::{ColumnKind, Relation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("ambiguous attribute {0}")]
    AmbiguousAttribute(String),
    #[error("duplicate source alias {0}")]
    DuplicateAlias(String),
    #[error("PREDICT({alias}) uses {found} feature columns but the model expects {expected}")]
    ArityMismatch {
        alias: String,
        expected: usize,
        found: usize,
    },
    #[error("class constant {value} outside [0, {classes})")]
    ClassOutOfRange { value: f64, classes: usize },
    #[error("invalid plan: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }
}

/// A call to the registered model on one source's row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictTerm {
    /// Source alias, or `*` before validation when the query has one source.
    pub source: String,
    /// Filled in by validation.
    #[serde(default)]
    pub feature_columns: Vec<String>,
    /// Set by validation when the term is compared to a class constant.
    #[serde(default)]
    pub class_binding: Option<usize>,
}

impl PredictTerm {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            feature_columns: Vec::new(),
            class_binding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Int(i64),
    Real(f64),
}

impl Literal {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Literal::Int(v) => v as f64,
            Literal::Real(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Column {
        qualifier: Option<String>,
        name: String,
    },
    Literal(Literal),
    Predict(PredictTerm),
    Binary {
        op: ArithOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Power {
        base: Box<Expr>,
        exponent: Box<Expr>,
    },
}

impl Expr {
    pub fn column(qualifier: Option<&str>, name: &str) -> Self {
        Expr::Column {
            qualifier: qualifier.map(str::to_string),
            name: name.to_string(),
        }
    }

    pub fn contains_predict(&self) -> bool {
        match self {
            Expr::Predict(_) => true,
            Expr::Column { .. } | Expr::Literal(_) => false,
            Expr::Binary { lhs, rhs, .. } => lhs.contains_predict() || rhs.contains_predict(),
            Expr::Power { base, exponent } => {
                base.contains_predict() || exponent.contains_predict()
            }
        }
    }

    /// Distinct PREDICT sources in first-occurrence order.
    pub fn predict_sources(&self, out: &mut Vec<String>) {
        match self {
            Expr::Predict(t) => {
                if !out.contains(&t.source) {
                    out.push(t.source.clone());
                }
            }
            Expr::Column { .. } | Expr::Literal(_) => {}
            Expr::Binary { lhs, rhs, .. } => {
                lhs.predict_sources(out);
                rhs.predict_sources(out);
            }
            Expr::Power { base, exponent } => {
                base.predict_sources(out);
                exponent.predict_sources(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    Compare {
        lhs: Expr,
        op: CmpOp,
        rhs: Expr,
    },
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
    Not(Box<Predicate>),
    Like {
        column: Expr,
        pattern: String,
    },
}

impl Predicate {
    pub fn predict_sources(&self, out: &mut Vec<String>) {
        match self {
            Predicate::Compare { lhs, rhs, .. } => {
                lhs.predict_sources(out);
                rhs.predict_sources(out);
            }
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.predict_sources(out);
                b.predict_sources(out);
            }
            Predicate::Not(a) => a.predict_sources(out),
            Predicate::Like { column, .. } => column.predict_sources(out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggKind {
    Count,
    Sum,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SelectItem {
    Star,
    CountStar,
    Sum(Expr),
    Avg(Expr),
    Expr(Expr),
}

impl SelectItem {
    pub fn aggregate(&self) -> Option<AggKind> {
        match self {
            SelectItem::CountStar => Some(AggKind::Count),
            SelectItem::Sum(_) => Some(AggKind::Sum),
            SelectItem::Avg(_) => Some(AggKind::Avg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub relation: String,
    pub alias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub select: Vec<SelectItem>,
    pub sources: Vec<Source>,
    pub filter: Option<Predicate>,
    pub group_by: Vec<Expr>,
}

impl QueryPlan {
    pub fn is_aggregate(&self) -> bool {
        self.select.iter().any(|s| s.aggregate().is_some()) || !self.group_by.is_empty()
    }

    pub fn source(&self, alias: &str) -> Option<&Source> {
        self.sources.iter().find(|s| s.alias == alias)
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Keyword(Kw),
    Int(i64),
    Real(f64),
    Str(String),
    Sym(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kw {
    Select,
    From,
    Where,
    Group,
    By,
    And,
    Or,
    Not,
    Like,
    Count,
    Sum,
    Avg,
    Predict,
    Power,
    As,
}

fn keyword(word: &str) -> Option<Kw> {
    Some(match word.to_ascii_uppercase().as_str() {
        "SELECT" => Kw::Select,
        "FROM" => Kw::From,
        "WHERE" => Kw::Where,
        "GROUP" => Kw::Group,
        "BY" => Kw::By,
        "AND" => Kw::And,
        "OR" => Kw::Or,
        "NOT" => Kw::Not,
        "LIKE" => Kw::Like,
        "COUNT" => Kw::Count,
        "SUM" => Kw::Sum,
        "AVG" => Kw::Avg,
        "PREDICT" => Kw::Predict,
        "POWER" => Kw::Power,
        "AS" => Kw::As,
        _ => return None,
    })
}

fn syntax(position: usize, message: impl Into<String>) -> QueryError {
    QueryError::Syntax {
        position,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, QueryError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &text[start..i];
            let tok = keyword(word).map_or_else(|| Tok::Ident(word.to_string()), Tok::Keyword);
            out.push((tok, start));
        } else if c.is_ascii_digit()
            || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
        {
            let mut real = false;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                real = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let save = i;
                i += 1;
                if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                    i += 1;
                }
                if i < bytes.len() && bytes[i].is_ascii_digit() {
                    real = true;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let s = &text[start..i];
            let tok = if real {
                Tok::Real(s.parse().map_err(|_| syntax(start, "bad number"))?)
            } else {
                Tok::Int(s.parse().map_err(|_| syntax(start, "integer out of range"))?)
            };
            out.push((tok, start));
        } else if c == b'\'' {
            i += 1;
            let mut s = String::new();
            loop {
                match bytes.get(i) {
                    None => return Err(syntax(start, "unterminated string")),
                    Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => {
                        s.push('\'');
                        i += 2;
                    }
                    Some(b'\'') => {
                        i += 1;
                        break;
                    }
                    Some(_) => {
                        let ch = text[i..].chars().next().unwrap();
                        s.push(ch);
                        i += ch.len_utf8();
                    }
                }
            }
            out.push((Tok::Str(s), start));
        } else {
            let two = text.get(i..i + 2);
            let sym: &'static str = match (c, two) {
                (_, Some("<=")) => "<=",
                (_, Some(">=")) => ">=",
                (_, Some("!=")) => "!=",
                (_, Some("<>")) => "!=",
                (b'<', _) => "<",
                (b'>', _) => ">",
                (b'=', _) => "=",
                (b'(', _) => "(",
                (b')', _) => ")",
                (b',', _) => ",",
                (b'.', _) => ".",
                (b'*', _) => "*",
                (b'+', _) => "+",
                (b'-', _) => "-",
                _ => {
                    return Err(syntax(
                        start,
                        format!("unexpected character {:?}", text[i..].chars().next().unwrap()),
                    ))
                }
            };
            i += sym.len().max(if two == Some("<>") { 2 } else { 0 });
            out.push((Tok::Sym(sym), start));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|(t, _)| t)
    }

    fn position(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn error(&self, message: impl Into<String>) -> QueryError {
        syntax(self.position(), message)
    }

    fn eat_kw(&mut self, kw: Kw) -> bool {
        if self.peek() == Some(&Tok::Keyword(kw)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: Kw) -> Result<(), QueryError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.error(format!("expected {}", format!("{kw:?}").to_uppercase())))
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), QueryError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(self.error(format!("expected '{sym}'")))
        }
    }

    fn ident(&mut self) -> Result<String, QueryError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.error("expected identifier")),
        }
    }

    fn query(&mut self) -> Result<QueryPlan, QueryError> {
        self.expect_kw(Kw::Select)?;
        let mut select = vec![self.select_item()?];
        while self.eat_sym(",") {
            select.push(self.select_item()?);
        }
        self.expect_kw(Kw::From)?;
        let mut sources = vec![self.source()?];
        while self.eat_sym(",") {
            sources.push(self.source()?);
        }
        let filter = if self.eat_kw(Kw::Where) {
            Some(self.pred()?)
        } else {
            None
        };
        let mut group_by = Vec::new();
        if self.eat_kw(Kw::Group) {
            self.expect_kw(Kw::By)?;
            group_by.push(self.expr()?);
            while self.eat_sym(",") {
                group_by.push(self.expr()?);
            }
        }
        if self.pos < self.toks.len() {
            return Err(self.error("unexpected trailing input"));
        }
        Ok(QueryPlan {
            select,
            sources,
            filter,
            group_by,
        })
    }

    fn select_item(&mut self) -> Result<SelectItem, QueryError> {
        if self.eat_sym("*") {
            return Ok(SelectItem::Star);
        }
        if self.eat_kw(Kw::Count) {
            self.expect_sym("(")?;
            self.expect_sym("*")?;
            self.expect_sym(")")?;
            return Ok(SelectItem::CountStar);
        }
        if self.eat_kw(Kw::Sum) {
            self.expect_sym("(")?;
            let e = self.expr()?;
            self.expect_sym(")")?;
            return Ok(SelectItem::Sum(e));
        }
        if self.eat_kw(Kw::Avg) {
            self.expect_sym("(")?;
            let e = self.expr()?;
            self.expect_sym(")")?;
            return Ok(SelectItem::Avg(e));
        }
        Ok(SelectItem::Expr(self.expr()?))
    }

    fn source(&mut self) -> Result<Source, QueryError> {
        let relation = self.ident()?;
        let alias = if self.eat_kw(Kw::As) {
            self.ident()?
        } else if let Some(Tok::Ident(a)) = self.peek() {
            let a = a.clone();
            self.pos += 1;
            a
        } else {
            relation.clone()
        };
        Ok(Source { relation, alias })
    }

    fn expr(&mut self) -> Result<Expr, QueryError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat_sym("+") {
                ArithOp::Add
            } else if self.eat_sym("-") {
                ArithOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn term(&mut self) -> Result<Expr, QueryError> {
        let mut lhs = self.atom()?;
        while self.eat_sym("*") {
            let rhs = self.atom()?;
            lhs = Expr::Binary {
                op: ArithOp::Mul,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, QueryError> {
        match self.peek().cloned() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(Expr::Literal(Literal::Int(v)))
            }
            Some(Tok::Real(v)) => {
                self.pos += 1;
                Ok(Expr::Literal(Literal::Real(v)))
            }
            Some(Tok::Sym("-")) => {
                self.pos += 1;
                match self.atom()? {
                    Expr::Literal(Literal::Int(v)) => Ok(Expr::Literal(Literal::Int(-v))),
                    Expr::Literal(Literal::Real(v)) => Ok(Expr::Literal(Literal::Real(-v))),
                    other => Ok(Expr::Binary {
                        op: ArithOp::Sub,
                        lhs: Box::new(Expr::Literal(Literal::Int(0))),
                        rhs: Box::new(other),
                    }),
                }
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Keyword(Kw::Predict)) => {
                self.pos += 1;
                self.expect_sym("(")?;
                let source = if self.eat_sym("*") {
                    "*".to_string()
                } else {
                    self.ident()?
                };
                self.expect_sym(")")?;
                Ok(Expr::Predict(PredictTerm::new(source)))
            }
            Some(Tok::Keyword(Kw::Power)) => {
                self.pos += 1;
                self.expect_sym("(")?;
                let base = self.expr()?;
                self.expect_sym(",")?;
                let exponent = self.expr()?;
                self.expect_sym(")")?;
                Ok(Expr::Power {
                    base: Box::new(base),
                    exponent: Box::new(exponent),
                })
            }
            Some(Tok::Ident(first)) => {
                self.pos += 1;
                if self.eat_sym(".") {
                    let name = self.ident()?;
                    Ok(Expr::Column {
                        qualifier: Some(first),
                        name,
                    })
                } else {
                    Ok(Expr::Column {
                        qualifier: None,
                        name: first,
                    })
                }
            }
            _ => Err(self.error("expected expression")),
        }
    }

    fn pred(&mut self) -> Result<Predicate, QueryError> {
        let mut lhs = self.conj()?;
        while self.eat_kw(Kw::Or) {
            let rhs = self.conj()?;
            lhs = Predicate::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn conj(&mut self) -> Result<Predicate, QueryError> {
        let mut lhs = self.neg()?;
        while self.eat_kw(Kw::And) {
            let rhs = self.neg()?;
            lhs = Predicate::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn neg(&mut self) -> Result<Predicate, QueryError> {
        if self.eat_kw(Kw::Not) {
            return Ok(Predicate::Not(Box::new(self.neg()?)));
        }
        if matches!(self.peek(), Some(Tok::Sym("("))) {
            // Either a parenthesised predicate or an expression that
            // starts with a parenthesis; try the former first.
            let save = self.pos;
            self.pos += 1;
            if let Ok(p) = self.pred() {
                if self.eat_sym(")") {
                    return Ok(p);
                }
            }
            self.pos = save;
        }
        let is_like = matches!(self.peek(), Some(Tok::Ident(_)))
            && (self.peek_at(1) == Some(&Tok::Keyword(Kw::Like))
                || (self.peek_at(1) == Some(&Tok::Sym("."))
                    && self.peek_at(3) == Some(&Tok::Keyword(Kw::Like))));
        if is_like {
            let column = self.atom()?;
            self.expect_kw(Kw::Like)?;
            return match self.peek().cloned() {
                Some(Tok::Str(pattern)) => {
                    self.pos += 1;
                    Ok(Predicate::Like { column, pattern })
                }
                _ => Err(self.error("expected string pattern")),
            };
        }
        let lhs = self.expr()?;
        let op = match self.peek() {
            Some(Tok::Sym("=")) => CmpOp::Eq,
            Some(Tok::Sym("!=")) => CmpOp::Ne,
            Some(Tok::Sym("<")) => CmpOp::Lt,
            Some(Tok::Sym("<=")) => CmpOp::Le,
            Some(Tok::Sym(">")) => CmpOp::Gt,
            Some(Tok::Sym(">=")) => CmpOp::Ge,
            _ => return Err(self.error("expected comparison operator")),
        };
        self.pos += 1;
        let rhs = self.expr()?;
        Ok(Predicate::Compare { lhs, op, rhs })
    }
}

pub fn parse_query(text: &str) -> Result<QueryPlan, QueryError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(syntax(0, "empty query"));
    }
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    p.query()
}

// ---------------------------------------------------------------------------
// Canonical printer

fn fmt_real(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Column {
                qualifier: Some(q),
                name,
            } => write!(f, "{q}.{name}"),
            Expr::Column {
                qualifier: None,
                name,
            } => f.write_str(name),
            Expr::Literal(Literal::Int(v)) => write!(f, "{v}"),
            Expr::Literal(Literal::Real(v)) => f.write_str(&fmt_real(*v)),
            Expr::Predict(t) => write!(f, "PREDICT({})", t.source),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Power { base, exponent } => write!(f, "POWER({base}, {exponent})"),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Compare { lhs, op, rhs } => write!(f, "{lhs} {} {rhs}", op.symbol()),
            Predicate::And(a, b) => write!(f, "({a} AND {b})"),
            Predicate::Or(a, b) => write!(f, "({a} OR {b})"),
            Predicate::Not(a) => write!(f, "NOT {a}"),
            Predicate::Like { column, pattern } => {
                write!(f, "{column} LIKE '{}'", pattern.replace('\'', "''"))
            }
        }
    }
}

impl fmt::Display for SelectItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectItem::Star => f.write_str("*"),
            SelectItem::CountStar => f.write_str("COUNT(*)"),
            SelectItem::Sum(e) => write!(f, "SUM({e})"),
            SelectItem::Avg(e) => write!(f, "AVG({e})"),
            SelectItem::Expr(e) => write!(f, "{e}"),
        }
    }
}

impl fmt::Display for QueryPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |items: Vec<String>| items.join(", ");
        write!(
            f,
            "SELECT {} FROM {}",
            join(self.select.iter().map(ToString::to_string).collect()),
            join(
                self.sources
                    .iter()
                    .map(|s| if s.alias == s.relation {
                        s.relation.clone()
                    } else {
                        format!("{} AS {}", s.relation, s.alias)
                    })
                    .collect()
            )
        )?;
        if let Some(p) = &self.filter {
            write!(f, " WHERE {p}")?;
        }
        if !self.group_by.is_empty() {
            write!(
                f,
                " GROUP BY {}",
                join(self.group_by.iter().map(ToString::to_string).collect())
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Validation

/// Schema of a queryable relation plus the columns fed to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub name: String,
    pub columns: Vec<(String, ColumnKind)>,
    pub feature_columns: Vec<String>,
}

impl RelationSchema {
    pub fn of(rel: &Relation, feature_columns: Vec<String>) -> Self {
        Self {
            name: rel.name.clone(),
            columns: rel.schema.iter().map(|c| (c.name.clone(), c.kind)).collect(),
            feature_columns,
        }
    }

    fn kind(&self, column: &str) -> Option<ColumnKind> {
        self.columns
            .iter()
            .find(|(n, _)| n == column)
            .map(|(_, k)| *k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub relations: Vec<RelationSchema>,
}

impl Catalog {
    pub fn get(&self, name: &str) -> Option<&RelationSchema> {
        self.relations.iter().find(|r| r.name == name)
    }
}

/// A plan whose references are resolved against a catalog and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckedPlan {
    plan: QueryPlan,
    classes: usize,
}

impl CheckedPlan {
    pub fn plan(&self) -> &QueryPlan {
        &self.plan
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Every source alias that some PREDICT term refers to.
    pub fn predicted_sources(&self) -> Vec<String> {
        let mut out = Vec::new();
        for item in &self.plan.select {
            match item {
                SelectItem::Sum(e) | SelectItem::Avg(e) | SelectItem::Expr(e) => {
                    e.predict_sources(&mut out)
                }
                _ => {}
            }
        }
        if let Some(p) = &self.plan.filter {
            p.predict_sources(&mut out);
        }
        for g in &self.plan.group_by {
            g.predict_sources(&mut out);
        }
        out
    }
}

impl CheckedPlan {
    /// Relations behind [`CheckedPlan::predicted_sources`], deduplicated, with
    /// the feature columns their PREDICT terms read.
    pub fn predicted_relations(&self) -> Vec<(String, Vec<String>)> {
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for alias in self.predicted_sources() {
            let Some(src) = self.plan.source(&alias) else {
                continue;
            };
            if out.iter().any(|(r, _)| *r == src.relation) {
                continue;
            }
            let mut cols = None;
            self.visit_predicts(&mut |t| {
                if t.source == alias && cols.is_none() {
                    cols = Some(t.feature_columns.clone());
                }
            });
            out.push((src.relation.clone(), cols.unwrap_or_default()));
        }
        out
    }

    fn visit_predicts(&self, f: &mut dyn FnMut(&PredictTerm)) {
        fn expr(e: &Expr, f: &mut dyn FnMut(&PredictTerm)) {
            match e {
                Expr::Predict(t) => f(t),
                Expr::Column { .. } | Expr::Literal(_) => {}
                Expr::Binary { lhs, rhs, .. } => {
                    expr(lhs, f);
                    expr(rhs, f);
                }
                Expr::Power { base, exponent } => {
                    expr(base, f);
                    expr(exponent, f);
                }
            }
        }
        fn pred(p: &Predicate, f: &mut dyn FnMut(&PredictTerm)) {
            match p {
                Predicate::Compare { lhs, rhs, .. } => {
                    expr(lhs, f);
                    expr(rhs, f);
                }
                Predicate::And(a, b) | Predicate::Or(a, b) => {
                    pred(a, f);
                    pred(b, f);
                }
                Predicate::Not(a) => pred(a, f),
                Predicate::Like { column, .. } => expr(column, f),
            }
        }
        for item in &self.plan.select {
            match item {
                SelectItem::Sum(e) | SelectItem::Avg(e) | SelectItem::Expr(e) => expr(e, f),
                _ => {}
            }
        }
        if let Some(p) = &self.plan.filter {
            pred(p, f);
        }
        for g in &self.plan.group_by {
            expr(g, f);
        }
    }
}

impl fmt::Display for CheckedPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.plan.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Number,
    Text,
    Bool,
}

struct Validator<'a> {
    aliases: HashMap<String, &'a RelationSchema>,
    order: Vec<String>,
    dim: usize,
    classes: usize,
}

impl Validator<'_> {
    fn resolve_column(
        &self,
        qualifier: &mut Option<String>,
        name: &str,
    ) -> Result<ColumnKind, QueryError> {
        match qualifier {
            Some(q) => {
                let rel = self
                    .aliases
                    .get(q.as_str())
                    .ok_or_else(|| QueryError::UnknownRelation(q.clone()))?;
                rel.kind(name)
                    .ok_or_else(|| QueryError::UnknownAttribute(format!("{q}.{name}")))
            }
            None => {
                let hits: Vec<&String> = self
                    .order
                    .iter()
                    .filter(|a| self.aliases[a.as_str()].kind(name).is_some())
                    .collect();
                match hits.as_slice() {
                    [] => Err(QueryError::UnknownAttribute(name.to_string())),
                    [one] => {
                        let kind = self.aliases[one.as_str()].kind(name).unwrap();
                        *qualifier = Some((*one).clone());
                        Ok(kind)
                    }
                    _ => Err(QueryError::AmbiguousAttribute(name.to_string())),
                }
            }
        }
    }

    fn expr(&self, e: &mut Expr) -> Result<Ty, QueryError> {
        match e {
            Expr::Column { qualifier, name } => {
                Ok(match self.resolve_column(qualifier, name)? {
                    ColumnKind::Text => Ty::Text,
                    ColumnKind::Boolean => Ty::Bool,
                    _ => Ty::Number,
                })
            }
            Expr::Literal(_) => Ok(Ty::Number),
            Expr::Predict(t) => {
                if t.source == "*" {
                    if self.order.len() != 1 {
                        return Err(QueryError::Invalid(
                            "PREDICT(*) needs exactly one source".into(),
                        ));
                    }
                    t.source = self.order[0].clone();
                }
                let rel = self
                    .aliases
                    .get(t.source.as_str())
                    .ok_or_else(|| QueryError::UnknownRelation(t.source.clone()))?;
                if rel.feature_columns.len() != self.dim {
                    return Err(QueryError::ArityMismatch {
                        alias: t.source.clone(),
                        expected: self.dim,
                        found: rel.feature_columns.len(),
                    });
                }
                for c in &rel.feature_columns {
                    match rel.kind(c) {
                        Some(ColumnKind::Text) => {
                            return Err(QueryError::Invalid(format!(
                                "feature column {c} of {} is text",
                                rel.name
                            )))
                        }
                        None => {
                            return Err(QueryError::UnknownAttribute(format!(
                                "{}.{c}",
                                rel.name
                            )))
                        }
                        _ => {}
                    }
                }
                t.feature_columns.clone_from(&rel.feature_columns);
                Ok(Ty::Number)
            }
            Expr::Binary { lhs, rhs, op } => {
                let (a, b) = (self.expr(lhs)?, self.expr(rhs)?);
                if a != Ty::Number || b != Ty::Number {
                    return Err(QueryError::Invalid(format!(
                        "operator {} needs numeric operands",
                        op.symbol()
                    )));
                }
                Ok(Ty::Number)
            }
            Expr::Power { base, exponent } => {
                let (a, b) = (self.expr(base)?, self.expr(exponent)?);
                if a != Ty::Number || b != Ty::Number {
                    return Err(QueryError::Invalid("POWER needs numeric operands".into()));
                }
                Ok(Ty::Number)
            }
        }
    }

    fn check_class_constant(&self, side: &mut Expr, other: &Expr) -> Result<(), QueryError> {
        if let (Expr::Predict(t), Expr::Literal(lit)) = (side, other) {
            let v = lit.as_f64();
            if v < 0.0 || v >= self.classes as f64 || v.fract() != 0.0 {
                return Err(QueryError::ClassOutOfRange {
                    value: v,
                    classes: self.classes,
                });
            }
            t.class_binding = Some(v as usize);
        }
        Ok(())
    }

    fn pred(&self, p: &mut Predicate) -> Result<(), QueryError> {
        match p {
            Predicate::Compare { lhs, op, rhs } => {
                let (a, b) = (self.expr(lhs)?, self.expr(rhs)?);
                if a != b {
                    return Err(QueryError::Invalid(format!(
                        "cannot compare {a:?} with {b:?}"
                    )));
                }
                if matches!(op, CmpOp::Eq | CmpOp::Ne) {
                    let r = rhs.clone();
                    self.check_class_constant(lhs, &r)?;
                    let l = lhs.clone();
                    self.check_class_constant(rhs, &l)?;
                }
                Ok(())
            }
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                self.pred(a)?;
                self.pred(b)
            }
            Predicate::Not(a) => self.pred(a),
            Predicate::Like { column, .. } => {
                if !matches!(column, Expr::Column { .. }) || self.expr(column)? != Ty::Text {
                    return Err(QueryError::Invalid("LIKE needs a text column".into()));
                }
                Ok(())
            }
        }
    }
}

/// Resolves every reference of `plan` against `catalog` and the model
/// dimensions.
pub fn validate_plan(
    plan: &QueryPlan,
    catalog: &Catalog,
    model_dim: usize,
    model_classes: usize,
) -> Result<CheckedPlan, QueryError> {
    let mut plan = plan.clone();
    let mut aliases = HashMap::new();
    let mut order = Vec::new();
    for s in &plan.sources {
        let rel = catalog
            .get(&s.relation)
            .ok_or_else(|| QueryError::UnknownRelation(s.relation.clone()))?;
        if aliases.insert(s.alias.clone(), rel).is_some() {
            return Err(QueryError::DuplicateAlias(s.alias.clone()));
        }
        order.push(s.alias.clone());
    }
    let v = Validator {
        aliases,
        order,
        dim: model_dim,
        classes: model_classes,
    };
    if let Some(p) = plan.filter.as_mut() {
        v.pred(p)?;
    }
    for g in plan.group_by.iter_mut() {
        v.expr(g)?;
    }
    let has_agg = plan.select.iter().any(|s| s.aggregate().is_some());
    for item in plan.select.iter_mut() {
        match item {
            SelectItem::Star => {
                if has_agg || !plan.group_by.is_empty() {
                    return Err(QueryError::Invalid(
                        "* cannot be combined with aggregates or GROUP BY".into(),
                    ));
                }
            }
            SelectItem::CountStar => {}
            SelectItem::Sum(e) | SelectItem::Avg(e) => {
                if v.expr(e)? != Ty::Number {
                    return Err(QueryError::Invalid("SUM/AVG need numeric input".into()));
                }
            }
            SelectItem::Expr(e) => {
                v.expr(e)?;
                if (has_agg || !plan.group_by.is_empty()) && !plan.group_by.contains(e) {
                    return Err(QueryError::Invalid(format!(
                        "{e} must appear in GROUP BY"
                    )));
                }
            }
        }
    }
    Ok(CheckedPlan {
        plan,
        classes: model_classes,
    })
}
